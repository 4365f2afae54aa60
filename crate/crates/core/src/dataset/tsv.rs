use std::fs;
use std::path::Path;

use super::Interaction;
use crate::error::{Error, Result};

/// Parses `user_id \t item_id \t timestamp [\t behavior_type]` rows. A first
/// row whose leading field is not an integer is treated as a header.
pub fn load_tsv(path: impl AsRef<Path>) -> Result<Vec<Interaction>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let row = raw.trim_end_matches('\r');
        if row.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split('\t').map(str::trim).collect();
        if out.is_empty() && idx == first_content_line(&text) && fields[0].parse::<u64>().is_err() {
            continue;
        }
        if fields.len() < 3 {
            return Err(err(
                line,
                format!("expected at least 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        if fields.len() > 4 {
            return Err(err(line, format!("expected at most 4 fields, found {}", fields.len())));
        }
        let int = |i: usize, name: &str| -> Result<i128> {
            fields[i]
                .parse::<i128>()
                .map_err(|_| err(line, format!("{name} `{}` is not an integer", fields[i])))
        };
        let user_id = u64::try_from(int(0, "user_id")?)
            .map_err(|_| err(line, "user_id must be non-negative".into()))?;
        let item_id = u64::try_from(int(1, "item_id")?)
            .map_err(|_| err(line, "item_id must be non-negative".into()))?;
        let timestamp = i64::try_from(int(2, "timestamp")?)
            .map_err(|_| err(line, "timestamp out of range".into()))?;
        let behavior = fields.get(3).filter(|s| !s.is_empty()).map(|s| s.to_string());
        out.push(Interaction {
            user_id,
            item_id,
            timestamp,
            behavior,
        });
    }
    Ok(out)
}

fn first_content_line(text: &str) -> usize {
    text.lines()
        .position(|l| !l.trim().is_empty())
        .unwrap_or(0)
}
