//! Small shared helpers: hashing, whitespace normalization, JSONL IO.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Hex-encoded SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Short (16-hex-char) content hash used for stable record ids.
pub fn short_hash(bytes: &[u8]) -> String {
    sha256_hex(bytes)[..16].to_string()
}

/// Derives a 64-bit seed from a parent seed and a label, so independent
/// stages and items draw from unrelated streams.
pub fn derive_seed(parent: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(parent.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Collapses runs of whitespace to single spaces and trims the ends.
pub fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Extracts the first balanced JSON object from free text, tolerating prose
/// or code fences around it. Returns `None` when no parseable object exists.
pub fn extract_json_object(text: &str) -> Option<serde_json::Value> {
    let bytes = text.as_bytes();
    let mut start = None;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate() {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' if start.is_some() => in_string = true,
            b'{' => {
                if start.is_none() {
                    start = Some(i);
                }
                depth += 1;
            }
            b'}' if start.is_some() => {
                depth -= 1;
                if depth == 0 {
                    let candidate = &text[start.unwrap()..=i];
                    if let Ok(v) = serde_json::from_str(candidate) {
                        return Some(v);
                    }
                    // keep scanning past this candidate
                    start = None;
                }
            }
            _ => {}
        }
    }
    None
}

/// Extracts the first balanced JSON array from free text. Same tolerance
/// as [`extract_json_object`].
pub fn extract_json_array(text: &str) -> Option<serde_json::Value> {
    let bytes = text.as_bytes();
    let mut start = None;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate() {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' if start.is_some() => in_string = true,
            b'[' | b'{' => {
                if start.is_none() {
                    if b == b'[' {
                        start = Some(i);
                    } else {
                        continue;
                    }
                }
                depth += 1;
            }
            b']' | b'}' if start.is_some() => {
                depth = depth.saturating_sub(1);
                if depth == 0 {
                    let candidate = &text[start.unwrap()..=i];
                    if let Ok(v) = serde_json::from_str::<serde_json::Value>(candidate) {
                        if v.is_array() {
                            return Some(v);
                        }
                    }
                    start = None;
                }
            }
            _ => {}
        }
    }
    None
}

/// Reads a JSONL file into a vector of `T`, reporting the offending line on failure.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> std::io::Result<Vec<T>> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| {
            std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("{}:{}: {e}", path.display(), lineno + 1),
            )
        })?;
        out.push(item);
    }
    Ok(out)
}

/// Writes items as JSONL to `path` atomically (temp file + rename).
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> std::io::Result<()> {
    write_atomic(path, |w| {
        for item in items {
            serde_json::to_writer(&mut *w, item)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

/// Serializes `value` as pretty JSON to `path` atomically.
pub fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        w.write_all(b"\n")
    })
}

/// Runs `fill` against a temp file next to `path`, then renames into place.
pub fn write_atomic(
    path: &Path,
    fill: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    let mut writer = BufWriter::new(File::create(&tmp)?);
    fill(&mut writer)?;
    writer.flush()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Counts non-empty lines in a file.
pub fn count_lines(path: &Path) -> std::io::Result<u64> {
    let reader = BufReader::new(File::open(path)?);
    let mut n = 0;
    for line in reader.lines() {
        if !line?.trim().is_empty() {
            n += 1;
        }
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_collapses_runs() {
        assert_eq!(normalize_ws("a  b"), "a b");
        assert_eq!(normalize_ws("  a\t\nb  "), "a b");
        assert_eq!(normalize_ws(""), "");
    }

    #[test]
    fn extract_json_skips_prose_and_fences() {
        let v = extract_json_object("sure! ```json\n{\"a\": 1}\n```").unwrap();
        assert_eq!(v["a"], 1);
        assert!(extract_json_object("no json here").is_none());
        assert!(extract_json_object("{broken").is_none());
    }

    #[test]
    fn extract_json_handles_nested_and_strings() {
        let v = extract_json_object(r#"x {"a": {"b": "}{"}, "c": [1,2]} y"#).unwrap();
        assert_eq!(v["a"]["b"], "}{");
    }

    #[test]
    fn extract_array_finds_the_first_balanced_array() {
        let v = extract_json_array("labels: [\"a\", \"b\"] trailing").unwrap();
        assert_eq!(v, serde_json::json!(["a", "b"]));
        let v = extract_json_array("[{\"name\": \"x\"}, {\"name\": \"y\"}]").unwrap();
        assert_eq!(v[1]["name"], "y");
        assert!(extract_json_array("no array").is_none());
        assert!(extract_json_array("[broken").is_none());
    }

    #[test]
    fn derive_seed_varies_by_label() {
        assert_ne!(derive_seed(7, "graph"), derive_seed(7, "chains"));
        assert_eq!(derive_seed(7, "graph"), derive_seed(7, "graph"));
    }
}
