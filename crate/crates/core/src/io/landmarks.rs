use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::objectives::LandmarkSet;

/// One point per line as comma-separated coordinates in mm. Blank lines and
/// lines starting with `#` are skipped.
pub fn parse_landmarks(text: &str) -> Result<LandmarkSet> {
    let mut points: Vec<Vec<f64>> = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let field = || format!("line {}", no + 1);
        let p: Vec<f64> = line
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::parse(field(), format!("not a number: {:?}", t.trim())))
            })
            .collect::<Result<_>>()?;
        if let Some(first) = points.first() {
            if first.len() != p.len() {
                return Err(Error::parse(field(), format!("{} values, expected {}", p.len(), first.len())));
            }
        } else if !(2..=3).contains(&p.len()) {
            return Err(Error::parse(field(), format!("{} values, expected 2 or 3", p.len())));
        }
        points.push(p);
    }
    LandmarkSet::new(points)
}

pub fn format_landmarks(set: &LandmarkSet) -> String {
    let mut out = String::new();
    for p in set.points() {
        let row: Vec<String> = p.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn read_landmarks(path: impl AsRef<Path>) -> Result<LandmarkSet> {
    parse_landmarks(&fs::read_to_string(path)?)
}

pub fn write_landmarks(path: impl AsRef<Path>, set: &LandmarkSet) -> Result<()> {
    fs::write(path, format_landmarks(set))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_cases() {
        assert!(parse_landmarks("").unwrap().is_empty());
        let s = parse_landmarks("1,2,3\n# note\n4, 5, 6\n\n7,8,9.5\n").unwrap();
        assert_eq!(s.points(), &[vec![1., 2., 3.], vec![4., 5., 6.], vec![7., 8., 9.5]]);
        match parse_landmarks("1,2,3\n1,2\n").unwrap_err() {
            Error::Parse { field, .. } => assert_eq!(field, "line 2"),
            e => panic!("{e:?}"),
        }
        match parse_landmarks("1,x\n").unwrap_err() {
            Error::Parse { field, .. } => assert_eq!(field, "line 1"),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn round_trip() {
        let s = LandmarkSet::new(vec![vec![0.1, 1.0 / 3.0], vec![-2.5e-7, 123456.789]]).unwrap();
        assert_eq!(parse_landmarks(&format_landmarks(&s)).unwrap(), s);
    }
}
