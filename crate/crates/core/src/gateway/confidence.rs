use serde::{Deserialize, Serialize};

use super::{GatewayError, GenerationOutput};

/// Which generated tokens feed the confidence average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceScope {
    /// Only the tokens spelling out the final answer.
    #[default]
    AnswerSpan,
    /// Every generated token.
    AllTokens,
}

/// `exp` of the mean log-probability over `span` (half-open token range).
pub fn answer_confidence(token_logprobs: &[f64], span: (usize, usize)) -> Result<f64, GatewayError> {
    let (start, end) = span;
    if end <= start {
        return Err(GatewayError::EmptySpan);
    }
    if end > token_logprobs.len() {
        return Err(GatewayError::SpanOutOfBounds { start, end, len: token_logprobs.len() });
    }
    let slice = &token_logprobs[start..end];
    if let Some(bad) = slice.iter().find(|v| !(v.is_finite() && **v <= 0.0)) {
        return Err(GatewayError::InvalidLogprob(*bad));
    }
    let mean = slice.iter().sum::<f64>() / slice.len() as f64;
    Ok(mean.exp())
}

fn strip_token(tok: &str) -> &str {
    tok.trim_matches(|c: char| c.is_whitespace() || "()[]{}.,:;!?*\"'`<>".contains(c))
}

fn as_option(candidate: &str, options: &[char]) -> Option<char> {
    let mut chars = strip_token(candidate).chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) if options.contains(&c) => Some(c),
        _ => None,
    }
}

/// Picks the chosen option letter out of free-form model text.
///
/// Priority: an `<answer>X</answer>` block, then `Best option: X`, then the
/// first standalone token that is one of `options`.
pub fn extract_answer(text: &str, options: &[char]) -> Option<char> {
    let mut rest = text;
    while let Some(open) = rest.find("<answer>") {
        let after = &rest[open + "<answer>".len()..];
        let Some(close) = after.find("</answer>") else { break };
        if let Some(c) = as_option(&after[..close], options) {
            return Some(c);
        }
        rest = &after[close..];
    }

    let lower = text.to_ascii_lowercase();
    let mut from = 0;
    while let Some(pos) = lower[from..].find("best option:") {
        let tail = &text[from + pos + "best option:".len()..];
        if let Some(tok) = tail.split_whitespace().next() {
            if let Some(c) = as_option(tok, options) {
                return Some(c);
            }
        }
        from += pos + 1;
    }

    text.split_whitespace().find_map(|tok| as_option(tok, options))
}

/// Half-open token range over which confidence is averaged.
///
/// Explicit spans win; otherwise the last token spelling `answer` is used
/// when token strings are known, and the whole output when they are not.
pub fn locate_answer_span(out: &GenerationOutput, answer: char, scope: ConfidenceScope) -> Option<(usize, usize)> {
    let len = out.token_logprobs.as_ref()?.len();
    if len == 0 {
        return None;
    }
    if scope == ConfidenceScope::AllTokens {
        return Some((0, len));
    }
    if let Some(span) = out.answer_span {
        return Some(span);
    }
    if let Some(tokens) = &out.tokens {
        let mut buf = [0u8; 4];
        let letter: &str = answer.encode_utf8(&mut buf);
        if let Some(i) = tokens.iter().rposition(|t| strip_token(t) == letter) {
            return Some((i, i + 1));
        }
    }
    Some((0, len))
}
