//! Small CSV helpers shared by the trajectory, observation and loss-log
//! formats. All files are plain `,`-separated numeric tables with a fixed
//! header line.

use crate::error::{Error, Result};

/// Format like C's `%.{digits}g`: `digits` significant digits, fixed
/// notation for moderate exponents, trailing zeros removed.
pub fn format_sig(value: f64, digits: usize) -> String {
    if value == 0.0 {
        return "0".to_string();
    }
    if !value.is_finite() {
        return format!("{value}");
    }
    let digits = digits.max(1);
    let sci = format!("{:.*e}", digits - 1, value);
    let (mantissa, exp) = sci.split_once('e').expect("exponent in {:e} output");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -5 || exp >= digits as i32 {
        let mantissa = trim_zeros(mantissa);
        return format!("{mantissa}e{exp}");
    }
    let decimals = (digits as i32 - 1 - exp).max(0) as usize;
    trim_zeros(&format!("{:.*}", decimals, value)).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Parse a numeric CSV whose first line must equal `header` exactly.
/// Returns each data row with its 1-based line number.
pub fn parse_csv(text: &str, source_name: &str, header: &[&str]) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut lines = text.split('\n').enumerate();
    let expected = header.join(",");
    match lines.next() {
        Some((_, first)) if first.trim_end_matches('\r') == expected => {}
        Some((_, first)) => {
            return Err(Error::csv(
                source_name,
                1,
                format!("expected header `{expected}`, found `{}`", first.trim_end()),
            ))
        }
        None => return Err(Error::csv(source_name, 1, "empty file")),
    }
    let mut rows = Vec::new();
    for (i, raw) in lines {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.len() {
            return Err(Error::csv(
                source_name,
                line_no,
                format!("expected {} fields, found {}", header.len(), fields.len()),
            ));
        }
        let mut values = Vec::with_capacity(fields.len());
        for (f, name) in fields.iter().zip(header) {
            let v: f64 = f.trim().parse().map_err(|_| {
                Error::csv(source_name, line_no, format!("non-numeric `{name}` value `{f}`"))
            })?;
            if !v.is_finite() {
                return Err(Error::csv(source_name, line_no, format!("non-finite `{name}`")));
            }
            values.push(v);
        }
        rows.push((line_no, values));
    }
    Ok(rows)
}
