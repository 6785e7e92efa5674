use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::Dialogue;
use crate::error::{DrexError, Result};
use crate::tokenizer::{Token, Tokenizer};

/// A rendered dialogue with its tokens. Tokenized once, reused by every input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedText {
    pub text: String,
    pub tokens: Vec<Token>,
}

impl EncodedText {
    pub fn new(text: String, tokenizer: &dyn Tokenizer) -> Result<Self> {
        let tokens = tokenizer.encode(&text)?;
        Ok(Self { text, tokens })
    }

    pub fn from_dialogue(dialogue: &Dialogue, tokenizer: &dyn Tokenizer) -> Result<Self> {
        Self::new(dialogue.render(), tokenizer)
    }
}

/// Inclusive token span in absolute input positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

impl TokenSpan {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn width(&self) -> usize {
        self.end + 1 - self.start
    }
}

/// Inclusive token span counted from the first dialogue token. Stable across
/// inputs that differ only in their prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DialogueSpan {
    pub start: usize,
    pub end: usize,
}

impl DialogueSpan {
    pub fn overlaps(&self, other: &DialogueSpan) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerSpan {
    pub start_token: usize,
    pub end_token: usize,
    pub source_text: String,
}

impl TriggerSpan {
    pub fn span(&self) -> TokenSpan {
        TokenSpan::new(self.start_token, self.end_token)
    }
}

/// `[CLS]{r/ex[SEP]}s[SEP]o[SEP]d` as token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelInput {
    pub token_ids: Vec<u32>,
    /// Tokens before the dialogue region (l).
    pub prefix_len: usize,
    /// Dialogue tokens kept after truncation (|d|).
    pub dialogue_len: usize,
    /// Byte range of each kept dialogue token in the rendered dialogue.
    pub dialogue_offsets: Vec<(usize, usize)>,
}

impl ModelInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn attention_region(&self) -> usize {
        self.token_ids.len()
    }

    pub fn dialogue_region(&self) -> Range<usize> {
        self.prefix_len..self.prefix_len + self.dialogue_len
    }

    pub fn contains_span(&self, span: TokenSpan) -> bool {
        let r = self.dialogue_region();
        span.start <= span.end && span.start >= r.start && span.end < r.end
    }

    fn check_span(&self, span: TokenSpan) -> Result<()> {
        if self.contains_span(span) {
            Ok(())
        } else {
            let r = self.dialogue_region();
            Err(DrexError::Bounds {
                start: span.start,
                end: span.end,
                region_start: r.start,
                region_end: r.end,
            })
        }
    }

    pub fn to_dialogue(&self, span: TokenSpan) -> Result<DialogueSpan> {
        self.check_span(span)?;
        Ok(DialogueSpan {
            start: span.start - self.prefix_len,
            end: span.end - self.prefix_len,
        })
    }

    /// `None` when the span was truncated away in this input.
    pub fn to_absolute(&self, span: DialogueSpan) -> Option<TokenSpan> {
        (span.start <= span.end && span.end < self.dialogue_len).then(|| {
            TokenSpan::new(span.start + self.prefix_len, span.end + self.prefix_len)
        })
    }

    /// Byte range of a dialogue span in the rendered dialogue.
    pub fn char_range(&self, span: DialogueSpan) -> Option<Range<usize>> {
        if span.start > span.end || span.end >= self.dialogue_len {
            return None;
        }
        Some(self.dialogue_offsets[span.start].0..self.dialogue_offsets[span.end].1)
    }

    pub fn span_text<'a>(&self, dialogue_text: &'a str, span: DialogueSpan) -> Option<&'a str> {
        self.char_range(span).and_then(|r| dialogue_text.get(r))
    }
}

/// Builds model inputs with a fixed tokenizer and maximum length.
#[derive(Debug, Clone)]
pub struct InputBuilder {
    tokenizer: Arc<dyn Tokenizer>,
    max_length: usize,
}

impl InputBuilder {
    pub fn new(tokenizer: Arc<dyn Tokenizer>, max_length: usize) -> Self {
        Self {
            tokenizer,
            max_length,
        }
    }

    pub fn tokenizer(&self) -> &Arc<dyn Tokenizer> {
        &self.tokenizer
    }

    pub fn max_length(&self) -> usize {
        self.max_length
    }

    pub fn encode_dialogue(&self, dialogue: &Dialogue) -> Result<EncodedText> {
        EncodedText::from_dialogue(dialogue, self.tokenizer.as_ref())
    }

    /// An empty `relation_or_explanation` is treated as absent. The dialogue is
    /// truncated from the end; the prefix is never truncated.
    pub fn build(
        &self,
        relation_or_explanation: Option<&str>,
        subject: &str,
        object: &str,
        dialogue: &EncodedText,
    ) -> Result<ModelInput> {
        if subject.trim().is_empty() || object.trim().is_empty() {
            return Err(DrexError::Input("subject and object must be nonempty".into()));
        }
        let ids = self.tokenizer.special_ids();
        let mut token_ids = vec![ids.sequence_start];
        if let Some(extra) = relation_or_explanation.filter(|s| !s.trim().is_empty()) {
            token_ids.extend(self.tokenizer.encode(extra)?.iter().map(|t| t.id));
            token_ids.push(ids.separator);
        }
        token_ids.extend(self.tokenizer.encode(subject)?.iter().map(|t| t.id));
        token_ids.push(ids.separator);
        token_ids.extend(self.tokenizer.encode(object)?.iter().map(|t| t.id));
        token_ids.push(ids.separator);

        let prefix_len = token_ids.len();
        if prefix_len >= self.max_length {
            return Err(DrexError::Input(format!(
                "prefix of {prefix_len} tokens leaves no room for the dialogue (max {})",
                self.max_length
            )));
        }
        let dialogue_len = dialogue.tokens.len().min(self.max_length - prefix_len);
        let kept = &dialogue.tokens[..dialogue_len];
        token_ids.extend(kept.iter().map(|t| t.id));
        Ok(ModelInput {
            token_ids,
            prefix_len,
            dialogue_len,
            dialogue_offsets: kept.iter().map(|t| (t.start, t.end)).collect(),
        })
    }
}

pub fn build_input(
    relation_or_explanation: Option<&str>,
    subject: &str,
    object: &str,
    dialogue: &Dialogue,
    tokenizer: Arc<dyn Tokenizer>,
    max_length: usize,
) -> Result<ModelInput> {
    let builder = InputBuilder::new(tokenizer, max_length);
    let encoded = builder.encode_dialogue(dialogue)?;
    builder.build(relation_or_explanation, subject, object, &encoded)
}

/// First occurrence of `trigger_text` in the dialogue whose boundaries coincide
/// with token boundaries inside the kept dialogue region. Case-sensitive.
pub fn align_trigger(trigger_text: &str, input: &ModelInput, dialogue_text: &str) -> Option<TriggerSpan> {
    let needle = trigger_text.trim();
    if needle.is_empty() {
        return None;
    }
    for (char_start, m) in dialogue_text.match_indices(needle) {
        let char_end = char_start + m.len();
        let first = input.dialogue_offsets.iter().position(|&(s, _)| s == char_start);
        let last = input.dialogue_offsets.iter().position(|&(_, e)| e == char_end);
        if let (Some(first), Some(last)) = (first, last) {
            if first <= last {
                return Some(TriggerSpan {
                    start_token: input.prefix_len + first,
                    end_token: input.prefix_len + last,
                    source_text: needle.to_string(),
                });
            }
        }
    }
    None
}

/// Replace every token of `span` with the mask id. `None` is the identity.
pub fn mask_span(input: &ModelInput, span: Option<TokenSpan>, mask_id: u32) -> Result<ModelInput> {
    let mut out = input.clone();
    if let Some(span) = span {
        input.check_span(span)?;
        for id in &mut out.token_ids[span.start..=span.end] {
            *id = mask_id;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Turn;
    use crate::tokenizer::{SpecialTokens, WordTokenizer};

    fn dialogue() -> Dialogue {
        Dialogue {
            id: "d0".into(),
            turns: vec![
                Turn {
                    speaker: "Speaker 1".into(),
                    utterance: "Chandler is your friend".into(),
                },
                Turn {
                    speaker: "Speaker 2".into(),
                    utterance: "yes your friend indeed".into(),
                },
                Turn {
                    speaker: "Speaker 1".into(),
                    utterance: "great news".into(),
                },
            ],
        }
    }

    fn setup() -> (InputBuilder, EncodedText, Arc<dyn Tokenizer>) {
        let d = dialogue();
        let text = d.render();
        let tok: Arc<dyn Tokenizer> = Arc::new(
            WordTokenizer::build(
                [text.as_str(), "person friends"],
                SpecialTokens::bert(),
                true,
            )
            .unwrap(),
        );
        let builder = InputBuilder::new(tok.clone(), 512);
        let enc = builder.encode_dialogue(&d).unwrap();
        (builder, enc, tok)
    }

    #[test]
    fn layout_and_prefix_len() {
        let (b, enc, tok) = setup();
        let input = b.build(None, "Speaker 1", "Chandler", &enc).unwrap();
        let ids = tok.special_ids();
        assert_eq!(input.token_ids[0], ids.sequence_start);
        // [CLS] speaker 1 [SEP] chandler [SEP]
        assert_eq!(input.prefix_len, 6);
        assert_eq!(input.token_ids[3], ids.separator);
        assert_eq!(input.token_ids[5], ids.separator);
        assert_eq!(input.dialogue_len, enc.tokens.len());
        assert_eq!(input.len(), input.prefix_len + input.dialogue_len);
    }

    #[test]
    fn empty_prefix_is_absent() {
        let (b, enc, _) = setup();
        let a = b.build(None, "Speaker 1", "Chandler", &enc).unwrap();
        let e = b.build(Some(""), "Speaker 1", "Chandler", &enc).unwrap();
        assert_eq!(a, e);
    }

    #[test]
    fn relation_prefix_adds_tokens_and_one_separator() {
        let (b, enc, tok) = setup();
        let a = b.build(None, "Speaker 1", "Chandler", &enc).unwrap();
        let r = b.build(Some("person friends"), "Speaker 1", "Chandler", &enc).unwrap();
        let extra = tok.encode("person friends").unwrap().len();
        assert_eq!(r.prefix_len, a.prefix_len + extra + 1);
    }

    #[test]
    fn empty_subject_is_input_error() {
        let (b, enc, _) = setup();
        assert!(matches!(
            b.build(None, " ", "Chandler", &enc),
            Err(DrexError::Input(_))
        ));
    }

    #[test]
    fn truncates_dialogue_from_the_end() {
        let (_, enc, tok) = setup();
        let b = InputBuilder::new(tok, 10);
        let input = b.build(None, "Speaker 1", "Chandler", &enc).unwrap();
        assert_eq!(input.len(), 10);
        assert_eq!(input.prefix_len, 6);
        assert_eq!(input.dialogue_len, 4);
        assert_eq!(input.token_ids[6..], enc.tokens[..4].iter().map(|t| t.id).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn alignment_picks_first_occurrence() {
        let (b, enc, _) = setup();
        let input = b.build(None, "Speaker 1", "Chandler", &enc).unwrap();
        let span = align_trigger("your friend", &input, &enc.text).unwrap();
        let rel = input.to_dialogue(span.span()).unwrap();
        assert_eq!(input.span_text(&enc.text, rel).unwrap(), "your friend");
        // first occurrence is in turn 1: speaker 1 : chandler is [your friend]
        assert_eq!(rel.start, 5);
        assert_eq!(rel.end, 6);
    }

    #[test]
    fn alignment_of_whole_utterance() {
        let (b, enc, _) = setup();
        let input = b.build(None, "Speaker 1", "Chandler", &enc).unwrap();
        let span = align_trigger("great news", &input, &enc.text).unwrap();
        let rel = input.to_dialogue(span.span()).unwrap();
        assert_eq!(input.span_text(&enc.text, rel).unwrap(), "great news");
        assert_eq!(span.end_token, input.len() - 1);
    }

    #[test]
    fn absent_or_partial_trigger_is_none() {
        let (b, enc, _) = setup();
        let input = b.build(None, "Speaker 1", "Chandler", &enc).unwrap();
        assert!(align_trigger("roommate", &input, &enc.text).is_none());
        // occurs only inside a token
        assert!(align_trigger("handler", &input, &enc.text).is_none());
    }

    #[test]
    fn masking() {
        let (b, enc, tok) = setup();
        let input = b.build(None, "Speaker 1", "Chandler", &enc).unwrap();
        let mask = tok.special_ids().mask;
        assert_eq!(mask_span(&input, None, mask).unwrap(), input);

        let mid = TokenSpan::new(input.prefix_len + 2, input.prefix_len + 4);
        let masked = mask_span(&input, Some(mid), mask).unwrap();
        let diff = masked
            .token_ids
            .iter()
            .zip(&input.token_ids)
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(diff, 3);

        let all = TokenSpan::new(input.prefix_len, input.len() - 1);
        let masked = mask_span(&input, Some(all), mask).unwrap();
        assert!(masked.token_ids[input.prefix_len..].iter().all(|&t| t == mask));
        assert_eq!(masked.token_ids[..input.prefix_len], input.token_ids[..input.prefix_len]);

        let bad = TokenSpan::new(1, input.prefix_len + 1);
        assert!(matches!(mask_span(&input, Some(bad), mask), Err(DrexError::Bounds { .. })));
    }
}
