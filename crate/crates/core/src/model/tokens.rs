//! Fixed prompt "tokenizer": every class prompt is the template
//! `a photo of a <class>` followed by an end-of-sequence marker.

/// Tokens standing in for "a photo of a".
const TEMPLATE: [usize; 4] = [1, 2, 3, 4];
pub const EOS: usize = 5;
const FIRST_CLASS_TOKEN: usize = 6;

/// Template, one class token, `[eos]`.
pub const CONTEXT_LEN: usize = TEMPLATE.len() + 2;

pub fn vocab_size(n_classes: usize) -> usize {
    FIRST_CLASS_TOKEN + n_classes
}

/// Token sequence of the prompt for class `class_index`.
pub fn prompt_tokens(class_index: usize) -> Vec<usize> {
    let mut t = TEMPLATE.to_vec();
    t.push(FIRST_CLASS_TOKEN + class_index);
    t.push(EOS);
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompts_are_distinct_and_terminated() {
        let a = prompt_tokens(0);
        let b = prompt_tokens(1);
        assert_ne!(a, b);
        assert_eq!(a.len(), CONTEXT_LEN);
        assert_eq!(*a.last().unwrap(), EOS);
        assert!(b.iter().all(|&t| t < vocab_size(2)));
    }
}
