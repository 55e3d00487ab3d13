use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{validate_segments, PhoneInventory, PhoneSegment, PosteriorGram, UtteranceRecord};
use crate::error::{Error, ParseErrorKind, Result};

/// Rows whose sum lies within this distance of 1 are renormalized on load.
pub const PARSE_ROW_SUM_TOLERANCE: f64 = 1e-3;

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    tok.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::parse(line, ParseErrorKind::NotNumeric(tok.to_string())))
}

fn parse_usize(tok: &str, line: usize) -> Result<usize> {
    tok.parse::<usize>()
        .map_err(|_| Error::parse(line, ParseErrorKind::NotNumeric(tok.to_string())))
}

/// Parses the text posteriorgram format: a `PPG <T> <P> <frame_shift_ms>`
/// header followed by T rows of P floats.
pub fn parse_ppg_file(text: &str) -> Result<PosteriorGram> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(1, ParseErrorKind::Header("empty input".into())))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != "PPG" {
        return Err(Error::parse(
            1,
            ParseErrorKind::Header(format!("expected `PPG <T> <P> <frame_shift_ms>`, got `{header}`")),
        ));
    }
    let bad_header = |what: &str| Error::parse(1, ParseErrorKind::Header(what.to_string()));
    let frames: usize = fields[1].parse().map_err(|_| bad_header("frame count"))?;
    let phones: usize = fields[2].parse().map_err(|_| bad_header("phone count"))?;
    let shift: f64 = fields[3].parse().map_err(|_| bad_header("frame shift"))?;
    if frames == 0 {
        return Err(bad_header("frame count must be positive"));
    }
    if phones < 2 {
        return Err(bad_header("phone count must be at least 2"));
    }
    if !(shift.is_finite() && shift > 0.0) {
        return Err(bad_header("frame shift must be positive"));
    }

    let mut values = Vec::with_capacity(frames * phones);
    let mut row = Vec::with_capacity(phones);
    let mut seen = 0;
    let mut last_line = 1;
    for (ln, line) in lines {
        last_line = ln;
        if line.trim().is_empty() {
            continue;
        }
        if seen == frames {
            return Err(Error::parse(
                ln,
                ParseErrorKind::RowCount {
                    expected: frames,
                    found: frames + 1,
                },
            ));
        }
        row.clear();
        for tok in line.split_whitespace() {
            row.push(parse_f64(tok, ln)?);
        }
        if row.len() != phones {
            return Err(Error::parse(
                ln,
                ParseErrorKind::RowLength {
                    expected: phones,
                    found: row.len(),
                },
            ));
        }
        if let Some(&v) = row.iter().find(|v| **v < 0.0 || **v > 1.0 + PARSE_ROW_SUM_TOLERANCE) {
            return Err(Error::parse(ln, ParseErrorKind::OutOfRange(v)));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > PARSE_ROW_SUM_TOLERANCE {
            return Err(Error::parse(ln, ParseErrorKind::RowSum(sum)));
        }
        values.extend(row.iter().map(|v| v / sum));
        seen += 1;
    }
    if seen != frames {
        return Err(Error::parse(
            last_line,
            ParseErrorKind::RowCount {
                expected: frames,
                found: seen,
            },
        ));
    }
    PosteriorGram::new(frames, phones, values, shift)
}

/// Serializes a posteriorgram with shortest round-trip float formatting.
pub fn write_ppg_file(ppg: &PosteriorGram) -> String {
    let mut out = String::with_capacity(ppg.values().len() * 12 + 32);
    let _ = writeln!(
        out,
        "PPG {} {} {}",
        ppg.frames(),
        ppg.phones(),
        ppg.frame_shift_ms()
    );
    for row in ppg.rows() {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}

/// Parses `<phone_symbol> <start_frame> <end_frame>` lines and checks that
/// the segments tile `[0, frames)`.
pub fn parse_alignment(text: &str, inv: &PhoneInventory, frames: usize) -> Result<Vec<PhoneSegment>> {
    let mut segs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 3 {
            return Err(Error::parse(
                ln,
                ParseErrorKind::Other(format!("expected `<phone> <start> <end>`, got `{line}`")),
            ));
        }
        let phone = inv
            .index_of(fields[0])
            .ok_or_else(|| Error::parse(ln, ParseErrorKind::UnknownPhone(fields[0].to_string())))?;
        let start = parse_usize(fields[1], ln)?;
        let end = parse_usize(fields[2], ln)?;
        segs.push(PhoneSegment { phone, start, end });
    }
    validate_segments(&segs, frames, inv.len())?;
    Ok(segs)
}

pub fn write_alignment(segs: &[PhoneSegment], inv: &PhoneInventory) -> String {
    let mut out = String::new();
    for s in segs {
        let sym = inv.symbol(s.phone).expect("segment phone outside inventory");
        let _ = writeln!(out, "{sym} {} {}", s.start, s.end);
    }
    out
}

pub fn parse_inventory(text: &str) -> Result<PhoneInventory> {
    let lines: Vec<&str> = text.lines().collect();
    let used = lines
        .iter()
        .rposition(|l| !l.trim().is_empty())
        .map_or(0, |i| i + 1);
    let mut symbols = Vec::with_capacity(used);
    for (i, l) in lines[..used].iter().enumerate() {
        let sym = l.trim();
        if sym.is_empty() {
            return Err(Error::parse(i + 1, ParseErrorKind::Other("blank phone symbol".into())));
        }
        symbols.push(sym.to_string());
    }
    PhoneInventory::new(symbols)
}

pub fn write_inventory(inv: &PhoneInventory) -> String {
    let mut out = String::new();
    for s in inv.symbols() {
        out.push_str(s);
        out.push('\n');
    }
    out
}

const MANIFEST_HEADER: &str = "id\tlabel\tppg_path\talign_path";

/// Parses a TSV manifest. Relative paths are resolved against `base_dir`.
pub fn parse_manifest(text: &str, base_dir: &Path) -> Result<Vec<UtteranceRecord>> {
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        if line.trim().is_empty() || (ln == 1 && line.starts_with("id\t")) {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                ln,
                ParseErrorKind::Other(format!("expected 4 tab-separated columns, found {}", fields.len())),
            ));
        }
        let id = fields[0].to_string();
        if id.is_empty() {
            return Err(Error::parse(ln, ParseErrorKind::Other("empty id".into())));
        }
        if !ids.insert(id.clone()) {
            return Err(Error::parse(ln, ParseErrorKind::Other(format!("duplicate id `{id}`"))));
        }
        let label = parse_usize(fields[1], ln)?;
        let resolve = |p: &str| -> PathBuf {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base_dir.join(p)
            }
        };
        let ppg_path = resolve(fields[2]);
        let align_path = match fields[3] {
            "-" | "" => None,
            p => Some(resolve(p)),
        };
        records.push(UtteranceRecord {
            id,
            label,
            ppg_path,
            align_path,
        });
    }
    Ok(records)
}

/// Writes a manifest; paths are written exactly as stored in the records.
pub fn write_manifest(records: &[UtteranceRecord]) -> String {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for r in records {
        let align = r
            .align_path
            .as_ref()
            .map_or_else(|| "-".to_string(), |p| p.display().to_string());
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}",
            r.id,
            r.label,
            r.ppg_path.display(),
            align
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inv_ab() -> PhoneInventory {
        PhoneInventory::new(vec!["a".into(), "b".into()]).unwrap()
    }

    #[test]
    fn one_hot_identity_file() {
        let p = parse_ppg_file("PPG 1 2 10.0\n1.0 0.0\n").unwrap();
        assert_eq!(p.frames(), 1);
        assert_eq!(p.values(), &[1.0, 0.0]);
        assert_eq!(p.frame_shift_ms(), 10.0);
    }

    #[test]
    fn slightly_off_rows_are_renormalized() {
        let p = parse_ppg_file("PPG 1 2 10\n0.5005 0.5000\n").unwrap();
        // reference: divide each entry by the parsed row sum
        let sum = 0.5005_f64 + 0.5000;
        assert_eq!(p.row(0), &[0.5005 / sum, 0.5000 / sum]);
        assert!((p.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bad_row_sum_names_the_line() {
        let err = parse_ppg_file("PPG 2 2 10\n1 0\n0.9 0.3\n").unwrap_err();
        match err {
            Error::Parse { line, kind } => {
                assert_eq!(line, 3);
                assert!(matches!(kind, ParseErrorKind::RowSum(_)));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_errors_are_distinct() {
        let kind = |text: &str| match parse_ppg_file(text).unwrap_err() {
            Error::Parse { kind, line } => (line, kind),
            other => panic!("unexpected {other:?}"),
        };
        assert!(matches!(kind("PPX 1 2 10\n1 0\n").1, ParseErrorKind::Header(_)));
        assert!(matches!(kind("PPG 1 2\n1 0\n").1, ParseErrorKind::Header(_)));
        assert!(matches!(
            kind("PPG 1 2 10\n1 0 0\n"),
            (2, ParseErrorKind::RowLength { expected: 2, found: 3 })
        ));
        assert!(matches!(kind("PPG 1 2 10\n1 x\n"), (2, ParseErrorKind::NotNumeric(_))));
        assert!(matches!(kind("PPG 2 2 10\n1 0\n").1, ParseErrorKind::RowCount { .. }));
        assert!(matches!(kind("PPG 1 2 10\n1 0\n0 1\n").1, ParseErrorKind::RowCount { .. }));
    }

    #[test]
    fn frame_shift_text_is_preserved() {
        let p = PosteriorGram::new(1, 2, vec![0.25, 0.75], 12.5).unwrap();
        let text = write_ppg_file(&p);
        assert!(text.starts_with("PPG 1 2 12.5\n"));
        assert_eq!(parse_ppg_file(&text).unwrap(), p);
    }

    #[test]
    fn alignment_examples() {
        let segs = parse_alignment("a 0 3\nb 3 5\n", &inv_ab(), 5).unwrap();
        assert_eq!(segs, vec![PhoneSegment::new(0, 0, 3), PhoneSegment::new(1, 3, 5)]);
        let gap = parse_alignment("a 0 3\nb 4 5\n", &inv_ab(), 5).unwrap_err();
        assert!(gap.to_string().contains("gap"));
        let unknown = parse_alignment("a 0 3\nz 3 5\n", &inv_ab(), 5).unwrap_err();
        assert!(matches!(
            unknown,
            Error::Parse { line: 2, kind: ParseErrorKind::UnknownPhone(_) }
        ));
        assert!(parse_alignment("a 0 3\nb 3 6\n", &inv_ab(), 5).is_err());
    }

    #[test]
    fn manifest_round_trip_and_resolution() {
        let recs = vec![
            UtteranceRecord {
                id: "u1".into(),
                label: 1,
                ppg_path: "ppg/u1.ppg".into(),
                align_path: Some("align/u1.ali".into()),
            },
            UtteranceRecord {
                id: "u2".into(),
                label: 0,
                ppg_path: "ppg/u2.ppg".into(),
                align_path: None,
            },
        ];
        let text = write_manifest(&recs);
        let parsed = parse_manifest(&text, Path::new("/data")).unwrap();
        assert_eq!(parsed[0].ppg_path, Path::new("/data/ppg/u1.ppg"));
        assert_eq!(parsed[1].align_path, None);
        assert_eq!(parsed[1].label, 0);
        let dup = "u1\t0\tx\t-\nu1\t1\ty\t-\n";
        assert!(parse_manifest(dup, Path::new(".")).is_err());
    }

    #[test]
    fn inventory_round_trip() {
        let inv = PhoneInventory::numbered(4).unwrap();
        assert_eq!(parse_inventory(&write_inventory(&inv)).unwrap(), inv);
        assert!(parse_inventory("a\n\nb\n").is_err());
    }
}
