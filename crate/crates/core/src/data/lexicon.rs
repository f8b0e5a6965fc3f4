//! A tiny verb/noun lexicon standing in for a semantic role labeller.
//!
//! Only used to make synthetic data self-contained; real datasets carry their
//! role masks in the manifest.

pub const ACTIONS: &[&str] = &["holding", "opening", "closing", "eating", "washing", "throwing"];
pub const OBJECTS: &[&str] = &["book", "door", "cup", "laptop", "towel", "bag"];
pub const SUBJECTS: &[&str] = &["woman", "man", "person"];

#[derive(Clone, Debug)]
pub struct Lexicon {
    pub verbs: Vec<String>,
    pub nouns: Vec<String>,
}

impl Default for Lexicon {
    fn default() -> Self {
        Lexicon {
            verbs: ACTIONS.iter().map(|s| s.to_string()).collect(),
            nouns: OBJECTS.iter().chain(SUBJECTS).map(|s| s.to_string()).collect(),
        }
    }
}

impl Lexicon {
    /// `(action_mask, object_mask)`: verbs are actions, nouns are objects.
    pub fn tag(&self, tokens: &[String]) -> (Vec<bool>, Vec<bool>) {
        let action = tokens.iter().map(|t| self.verbs.contains(t)).collect();
        let object = tokens.iter().map(|t| self.nouns.contains(t)).collect();
        (action, object)
    }
}

pub fn lexicon_tag(tokens: &[String]) -> (Vec<bool>, Vec<bool>) {
    Lexicon::default().tag(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &[&str]) -> Vec<String> {
        s.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn woman_holding_book_frame() {
        let (a, o) = lexicon_tag(&toks(&["a", "woman", "holding", "a", "book"]));
        assert_eq!(a, [false, false, true, false, false]);
        assert_eq!(o, [false, true, false, false, true]);
    }

    #[test]
    fn no_hits_gives_empty_masks() {
        let (a, o) = lexicon_tag(&toks(&["walks", "into", "the", "room"]));
        assert!(a.iter().chain(&o).all(|&b| !b));
    }

    #[test]
    fn repeated_verb_tagged_every_time() {
        let (a, _) = lexicon_tag(&toks(&["opening", "the", "door", "opening"]));
        assert_eq!(a, [true, false, false, true]);
    }

    #[test]
    fn verbs_and_nouns_never_overlap() {
        let lex = Lexicon::default();
        assert!(lex.verbs.iter().all(|v| !lex.nouns.contains(v)));
    }
}
