use super::{PhoneSegment, PosteriorGram};

/// Index of the largest entry; ties go to the lowest index.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Collapses a label sequence into maximal runs of equal labels.
pub fn run_length_encode(labels: &[usize]) -> Vec<PhoneSegment> {
    let mut runs: Vec<PhoneSegment> = Vec::new();
    for (t, &p) in labels.iter().enumerate() {
        match runs.last_mut() {
            Some(last) if last.phone == p => last.end = t + 1,
            _ => runs.push(PhoneSegment::new(p, t, t + 1)),
        }
    }
    runs
}

/// Frame-wise argmax decoding with run merging.
///
/// Runs shorter than `min_run` frames are absorbed by the segment to their
/// left (the first run is kept regardless), and a run that ends up adjacent to
/// a segment with the same phone is joined to it.
pub fn greedy_decode(ppg: &PosteriorGram, min_run: usize) -> Vec<PhoneSegment> {
    let min_run = min_run.max(1);
    let labels: Vec<usize> = ppg.rows().map(argmax).collect();
    let mut out: Vec<PhoneSegment> = Vec::new();
    for run in run_length_encode(&labels) {
        match out.last_mut() {
            Some(last) if run.len() < min_run || run.phone == last.phone => last.end = run.end,
            _ => out.push(run),
        }
    }
    out
}
