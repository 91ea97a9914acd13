//! CSV files exchanged between subcommands.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::{Error, Result};

/// Renders a float with 17 significant digits, positional when the
/// exponent is moderate and scientific otherwise. Parsing the output
/// recovers the exact f64.
pub fn format_sig17(x: f64) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.16e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-5..17).contains(&exp) {
        return sci;
    }
    let (sign, mantissa) = match mantissa.strip_prefix('-') {
        Some(m) => ("-", m),
        None => ("", mantissa),
    };
    let digits: String = mantissa.chars().filter(|c| *c != '.').collect();
    let mut out = String::from(sign);
    if exp < 0 {
        out.push_str("0.");
        out.extend(std::iter::repeat_n('0', (-exp - 1) as usize));
        out.push_str(&digits);
    } else {
        let point = exp as usize + 1;
        out.push_str(&digits[..point]);
        if point < digits.len() {
            out.push('.');
            out.push_str(&digits[point..]);
        }
    }
    if out.contains('.') {
        while out.ends_with('0') {
            out.pop();
        }
        if out.ends_with('.') {
            out.pop();
        }
    }
    out
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(f))
}

pub(crate) fn finish(path: &Path, mut w: impl Write) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `sample_id,score` rows sorted by sample id.
pub fn write_scores(path: impl AsRef<Path>, scores: &[(String, f64)]) -> Result<()> {
    let path = path.as_ref();
    let mut sorted: Vec<&(String, f64)> = scores.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["sample_id", "score"])?;
    for (id, s) in sorted {
        w.write_record([id.as_str(), &format_sig17(*s)])?;
    }
    let inner = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    finish(path, inner)
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<(String, f64)>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["sample_id", "score"] {
        return Err(Error::Format(format!(
            "{}: expected header sample_id,score, found {:?}",
            path.display(),
            headers
        )));
    }
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let score: f64 = rec[1].trim().parse().map_err(|_| {
            Error::Format(format!(
                "{}: row {}: bad score {:?}",
                path.display(),
                line + 1,
                &rec[1]
            ))
        })?;
        if !score.is_finite() {
            return Err(Error::NonFinite(format!("{} row {}", path.display(), line + 1)));
        }
        out.push((rec[0].to_string(), score));
    }
    Ok(out)
}
