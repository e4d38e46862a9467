//! Text feature files: one `label<TAB>v1,v2,...` record per line, `#`
//! starts a comment line.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use dcvae_core::episodic::{FeatureBank, Split};

use crate::error::CliError;

pub type Records = Vec<(String, Vec<f64>)>;

/// Parses records; widths must agree across lines.
pub fn parse_records(text: &str, origin: &Path) -> Result<Records, CliError> {
    let mut out: Records = Vec::new();
    let mut width: Option<(usize, usize)> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let fail = |msg: String| CliError::Format {
            path: origin.to_path_buf(),
            line: line_no,
            msg,
        };
        let (label, values) = line
            .split_once('\t')
            .ok_or_else(|| fail("expected `label<TAB>values`".into()))?;
        let label = label.trim();
        if label.is_empty() {
            return Err(fail("empty label".into()));
        }
        let vec = values
            .split(',')
            .map(|v| {
                let v = v.trim();
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| fail(format!("`{v}` is not a finite number")))
            })
            .collect::<Result<Vec<f64>, _>>()?;
        match width {
            None => width = Some((vec.len(), line_no)),
            Some((w, first)) if w != vec.len() => {
                return Err(fail(format!("width {} differs from width {w} on line {first}", vec.len())));
            }
            _ => {}
        }
        out.push((label.to_string(), vec));
    }
    Ok(out)
}

pub fn read_records(path: &Path) -> Result<Records, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_records(&text, path)
}

pub fn format_records<'a>(records: impl IntoIterator<Item = (&'a str, &'a [f64])>) -> String {
    let mut out = String::new();
    for (label, vec) in records {
        out.push_str(label);
        out.push('\t');
        for (i, v) in vec.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            // `{}` prints the shortest string that parses back to the same bits
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| CliError::io(path, e))
}

/// Paths of one split's feature and semantic files.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BankPaths {
    pub features: PathBuf,
    pub semantics: PathBuf,
}

pub fn load_feature_bank(paths: &BankPaths, split: Split) -> Result<FeatureBank, CliError> {
    let features = read_records(&paths.features)?;
    let semantics = read_records(&paths.semantics)?;
    let missing = features
        .iter()
        .enumerate()
        .find(|(_, (l, _))| !semantics.iter().any(|(s, _)| s == l));
    if let Some((i, (label, _))) = missing {
        return Err(CliError::Format {
            path: paths.features.clone(),
            line: line_of_record(&paths.features, i),
            msg: format!("label `{label}` has no entry in {}", paths.semantics.display()),
        });
    }
    FeatureBank::from_named(split, features, semantics).map_err(|e| CliError::Data {
        path: paths.features.clone(),
        msg: e.to_string(),
    })
}

// line number of the i-th record, skipping comments and blanks
fn line_of_record(path: &Path, i: usize) -> usize {
    let Ok(text) = fs::read_to_string(path) else { return 0 };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .nth(i)
        .map_or(0, |(n, _)| n + 1)
}

pub fn save_feature_bank(bank: &FeatureBank, paths: &BankPaths) -> Result<(), CliError> {
    write_text(&paths.features, &format_records(bank.named_features()))?;
    write_text(&paths.semantics, &format_records(bank.named_semantics()))
}
