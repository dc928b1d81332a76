/// Lowercased word tokens; any non-alphanumeric character separates words.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_on_punctuation_and_case() {
        assert_eq!(words("Q: Who's THERE?"), vec!["q", "who", "s", "there"]);
        assert!(words(" ,.; ").is_empty());
    }
}
