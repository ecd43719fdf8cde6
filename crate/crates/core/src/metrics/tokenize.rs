/// Lowercased words with ASCII punctuation removed, split on whitespace.
pub fn tokenize(s: &str) -> Vec<String> {
    s.chars().filter(|c| !c.is_ascii_punctuation()).collect::<String>().to_lowercase().split_whitespace().map(str::to_string).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn strips_and_lowers() {
        assert_eq!(
            tokenize("Breaking news: A dog barks, more at Eleven!"),
            ["breaking", "news", "a", "dog", "barks", "more", "at", "eleven"]
        );
        assert!(tokenize("  ... ").is_empty());
    }

    proptest! {
        #[test]
        fn idempotent(s in "[ -~]{0,60}") {
            let once = tokenize(&s);
            prop_assert_eq!(tokenize(&once.join(" ")), once.clone());
            prop_assert!(once.iter().all(|t| !t.is_empty()));
        }
    }
}
