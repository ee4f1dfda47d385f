/// Lowercased word-level split. Alphanumeric runs are words, every other
/// non-space character is its own token, and `@<id>` item markers stay whole.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '@' && i + 1 < chars.len() && is_id_char(chars[i + 1]) {
            let start = i;
            i += 1;
            while i < chars.len() && is_id_char(chars[i]) {
                i += 1;
            }
            out.push(chars[start..i].iter().collect::<String>());
        } else if c.is_alphanumeric() {
            let start = i;
            while i < chars.len() && chars[i].is_alphanumeric() {
                i += 1;
            }
            out.push(chars[start..i].iter().collect::<String>().to_lowercase());
        } else {
            out.push(c.to_string());
            i += 1;
        }
    }
    out
}

fn is_id_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

/// The catalog id inside an `@<id>` token.
pub fn item_marker(token: &str) -> Option<&str> {
    token.strip_prefix('@').filter(|rest| !rest.is_empty())
}

pub fn item_token(id: &str) -> String {
    format!("@{id}")
}
