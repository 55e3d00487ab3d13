use super::{validate_segments, EmbeddingMode, PhoneSegment, PosteriorGram};
use crate::error::{Error, Result};

/// Reserved ids in the phone-token vocabulary.
pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const SEP_ID: usize = 2;
/// Number of reserved ids preceding the phone ids in the default vocabulary.
pub const NUM_SPECIAL_IDS: usize = 3;

/// Default phone→id map: phone `i` becomes token `i + NUM_SPECIAL_IDS`.
pub fn default_phone_vocab(phones: usize) -> Vec<usize> {
    (0..phones).map(|p| p + NUM_SPECIAL_IDS).collect()
}

/// Per-segment mean of the posteriorgram rows, one output row per segment.
pub fn average_ppg(ppg: &PosteriorGram, segs: &[PhoneSegment]) -> Result<Vec<Vec<f64>>> {
    validate_segments(segs, ppg.frames(), ppg.phones())?;
    let out = segs
        .iter()
        .map(|s| {
            let mut acc = vec![0.0f64; ppg.phones()];
            for t in s.start..s.end {
                for (a, v) in acc.iter_mut().zip(ppg.row(t)) {
                    *a += v;
                }
            }
            let n = s.len() as f64;
            acc.iter_mut().for_each(|a| *a /= n);
            acc
        })
        .collect();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum TokenContent {
    /// `len` row vectors of width `dim`, row-major.
    Vectors { dim: usize, data: Vec<f64> },
    Ids(Vec<usize>),
}

/// Token content, positions, segment ids and mask of one utterance, padded
/// to a fixed length. Real tokens always form a prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedInput {
    pub mode: EmbeddingMode,
    pub content: TokenContent,
    pub positions: Vec<usize>,
    pub segments: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TokenizedInput {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// Number of real (unmasked) tokens.
    pub fn num_real(&self) -> usize {
        self.mask.iter().take_while(|m| **m).count()
    }

    pub fn vector(&self, i: usize) -> Option<&[f64]> {
        match &self.content {
            TokenContent::Vectors { dim, data } => Some(&data[i * dim..(i + 1) * dim]),
            TokenContent::Ids(_) => None,
        }
    }

    /// Checks the length/mask/position bookkeeping.
    pub fn validate(&self) -> Result<()> {
        let l = self.mask.len();
        let content_len = match &self.content {
            TokenContent::Vectors { dim, data } => {
                if *dim == 0 || data.len() % dim != 0 {
                    return Err(Error::Input("ragged token vectors".into()));
                }
                data.len() / dim
            }
            TokenContent::Ids(ids) => ids.len(),
        };
        if content_len != l || self.positions.len() != l || self.segments.len() != l {
            return Err(Error::Input("token lists have unequal lengths".into()));
        }
        let n = self.num_real();
        if self.mask[n..].iter().any(|m| *m) {
            return Err(Error::Input("mask is not a prefix".into()));
        }
        if self.positions.iter().enumerate().any(|(i, p)| *p != i) {
            return Err(Error::Input("positions must be 0..L-1".into()));
        }
        if self.mode.is_vector() != matches!(self.content, TokenContent::Vectors { .. }) {
            return Err(Error::Input(format!("content does not match mode {}", self.mode)));
        }
        Ok(())
    }
}

/// Builds the padded token input for one utterance.
///
/// At most `max_len - 2` real tokens are kept (tail truncation); the two
/// remaining slots are consumed by CLS/SEP when the input is embedded.
pub fn build_tokens(
    ppg: &PosteriorGram,
    segs: Option<&[PhoneSegment]>,
    mode: EmbeddingMode,
    vocab: Option<&[usize]>,
    max_len: usize,
) -> Result<TokenizedInput> {
    if max_len < 3 {
        return Err(Error::Config(format!("max_len must be at least 3, got {max_len}")));
    }
    let budget = max_len - 2;
    let p = ppg.phones();
    let (content, n) = match mode {
        EmbeddingMode::PpgFrm => {
            let n = ppg.frames().min(budget);
            let mut data = ppg.values()[..n * p].to_vec();
            data.resize(max_len * p, 0.0);
            (TokenContent::Vectors { dim: p, data }, n)
        }
        EmbeddingMode::AvPpg => {
            let segs = segs.ok_or_else(|| Error::Input("avppg mode requires phone segments".into()))?;
            if segs.is_empty() {
                return Err(Error::Input("empty utterance".into()));
            }
            let rows = average_ppg(ppg, segs)?;
            let n = rows.len().min(budget);
            let mut data: Vec<f64> = rows[..n].concat();
            data.resize(max_len * p, 0.0);
            (TokenContent::Vectors { dim: p, data }, n)
        }
        EmbeddingMode::PhoneEmb => {
            let segs =
                segs.ok_or_else(|| Error::Input("phone_emb mode requires phone segments".into()))?;
            let vocab =
                vocab.ok_or_else(|| Error::Input("phone_emb mode requires a phone vocabulary".into()))?;
            if vocab.len() < p {
                return Err(Error::Input(format!(
                    "phone vocabulary covers {} phones, inventory has {p}",
                    vocab.len()
                )));
            }
            if segs.is_empty() {
                return Err(Error::Input("empty utterance".into()));
            }
            validate_segments(segs, ppg.frames(), p)?;
            let n = segs.len().min(budget);
            let mut ids: Vec<usize> = segs[..n].iter().map(|s| vocab[s.phone]).collect();
            ids.resize(max_len, PAD_ID);
            (TokenContent::Ids(ids), n)
        }
    };
    let mut mask = vec![false; max_len];
    mask[..n].iter_mut().for_each(|m| *m = true);
    Ok(TokenizedInput {
        mode,
        content,
        positions: (0..max_len).collect(),
        segments: vec![0; max_len],
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_frame() -> PosteriorGram {
        PosteriorGram::from_rows(&[vec![0.2, 0.8], vec![0.6, 0.4]], 10.0).unwrap()
    }

    #[test]
    fn mean_of_one_frame_is_the_frame() {
        let p = two_frame();
        let segs = [PhoneSegment::new(1, 0, 1), PhoneSegment::new(0, 1, 2)];
        let avg = average_ppg(&p, &segs).unwrap();
        assert_eq!(avg[0], p.row(0));
        assert_eq!(avg[1], p.row(1));
    }

    #[test]
    fn mean_of_two_frames() {
        let avg = average_ppg(&two_frame(), &[PhoneSegment::new(0, 0, 2)]).unwrap();
        assert!((avg[0][0] - 0.4).abs() < 1e-15);
        assert!((avg[0][1] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn ppg_frm_shape_bookkeeping() {
        let rows: Vec<Vec<f64>> = (0..5).map(|_| vec![0.5, 0.5]).collect();
        let p = PosteriorGram::from_rows(&rows, 10.0).unwrap();
        let t = build_tokens(&p, None, EmbeddingMode::PpgFrm, None, 16).unwrap();
        t.validate().unwrap();
        assert_eq!(t.len(), 16);
        assert_eq!(t.num_real(), 5);
        assert_eq!(&t.positions[..5], &[0, 1, 2, 3, 4]);
        assert_eq!(t.vector(4), Some(&[0.5, 0.5][..]));
        assert_eq!(t.vector(5), Some(&[0.0, 0.0][..]));
    }

    #[test]
    fn phone_emb_lookup() {
        let rows: Vec<Vec<f64>> = (0..6).map(|_| vec![0.5, 0.5]).collect();
        let p = PosteriorGram::from_rows(&rows, 10.0).unwrap();
        let segs = [
            PhoneSegment::new(0, 0, 2),
            PhoneSegment::new(1, 2, 4),
            PhoneSegment::new(0, 4, 6),
        ];
        let vocab = [7, 9];
        let t = build_tokens(&p, Some(&segs), EmbeddingMode::PhoneEmb, Some(&vocab), 8).unwrap();
        match &t.content {
            TokenContent::Ids(ids) => assert_eq!(&ids[..3], &[7, 9, 7]),
            _ => panic!("expected ids"),
        }
        assert_eq!(t.num_real(), 3);
    }

    #[test]
    fn truncation_reserves_two_slots() {
        let rows: Vec<Vec<f64>> = (0..10).map(|_| vec![1.0, 0.0]).collect();
        let p = PosteriorGram::from_rows(&rows, 10.0).unwrap();
        let t = build_tokens(&p, None, EmbeddingMode::PpgFrm, None, 4).unwrap();
        assert_eq!(t.num_real(), 2);
        assert_eq!(t.len(), 4);
    }

    #[test]
    fn missing_requirements_are_errors() {
        let p = two_frame();
        assert!(build_tokens(&p, None, EmbeddingMode::AvPpg, None, 8).is_err());
        let segs = [PhoneSegment::new(0, 0, 2)];
        assert!(build_tokens(&p, Some(&segs), EmbeddingMode::PhoneEmb, None, 8).is_err());
        assert!(build_tokens(&p, Some(&[]), EmbeddingMode::AvPpg, None, 8).is_err());
        assert!(build_tokens(&p, None, EmbeddingMode::PpgFrm, None, 2).is_err());
    }
}
