/// Lowercase, map every character outside `[a-z0-9]` to a space, split on
/// whitespace. Shared by the CIDEr filter, the metrics and the extractive
/// summarizer so every stage sees the same token stream.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_ascii_lowercase() || c.is_ascii_digit() { c } else { ' ' })
        .collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}
