//! Plain-text `key = value` files: one pair per line, `#` starts a comment,
//! blank lines are ignored.

/// One parsed pair with its 1-based line number.
pub(crate) struct Entry<'a> {
    pub line: usize,
    pub key: &'a str,
    pub value: &'a str,
}

pub(crate) fn parse(text: &str) -> std::result::Result<Vec<Entry<'_>>, String> {
    let mut out: Vec<Entry<'_>> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected `key = value`", i + 1))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(format!("line {}: empty key", i + 1));
        }
        if out.iter().any(|e| e.key == key) {
            return Err(format!("line {}: duplicate key `{key}`", i + 1));
        }
        out.push(Entry {
            line: i + 1,
            key,
            value: value.trim(),
        });
    }
    Ok(out)
}

pub(crate) fn list<T: std::str::FromStr>(value: &str) -> Option<Vec<T>> {
    if value.is_empty() {
        return Some(Vec::new());
    }
    value.split(',').map(|v| v.trim().parse().ok()).collect()
}

pub(crate) fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_blanks_and_whitespace() {
        let e = parse("# header\n\n a = 1 \nb=2,3 # trailing\n").unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!((e[0].key, e[0].value, e[0].line), ("a", "1", 3));
        assert_eq!(list::<u32>(e[1].value), Some(vec![2, 3]));
    }

    #[test]
    fn malformed_lines_rejected() {
        assert!(parse("novalue\n").is_err());
        assert!(parse("= 3\n").is_err());
        assert!(parse("a=1\na=2\n").is_err());
        assert_eq!(list::<u32>("1,x"), None);
    }
}
