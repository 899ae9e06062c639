pub mod embed;
pub mod gateway;
pub mod media;
pub mod runner;
pub mod subtitle;
pub mod synthesis;
pub mod tools;
pub mod util;
pub mod world;
