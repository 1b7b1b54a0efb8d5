//! Recognition target metrics: face-recognition similarity deltas, plate
//! Jaro similarity, and the Levenshtein distance used by the labeling
//! pipeline.

use crate::backends::FaceEmbedder;
use crate::error::Result;
use crate::types::{cosine_similarity, ImageRef, PlateString};
use serde::{Deserialize, Serialize};

/// Jaro similarity of two strings in [0, 1].
///
/// Matching window is the standard `floor(max(|s1|, |s2|) / 2) - 1`. The
/// transposition term is evaluated as `(2m - c) / 2m` with `c` the raw
/// count of order mismatches, so no intermediate rounding happens before
/// the final division. `m = 0` (including both strings empty) yields 0.
pub fn jaro(s1: &str, s2: &str) -> f64 {
    let a: Vec<char> = s1.chars().collect();
    let b: Vec<char> = s2.chars().collect();
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let window = (a.len().max(b.len()) / 2).saturating_sub(1);

    let mut a_matched = vec![false; a.len()];
    let mut b_matched = vec![false; b.len()];
    let mut m = 0usize;
    for (i, ca) in a.iter().enumerate() {
        let lo = i.saturating_sub(window);
        let hi = (i + window + 1).min(b.len());
        for j in lo..hi {
            if !b_matched[j] && b[j] == *ca {
                a_matched[i] = true;
                b_matched[j] = true;
                m += 1;
                break;
            }
        }
    }
    if m == 0 {
        return 0.0;
    }

    // raw order-mismatch count; t = c / 2
    let matched_a = a.iter().zip(&a_matched).filter(|(_, &f)| f).map(|(c, _)| c);
    let matched_b = b.iter().zip(&b_matched).filter(|(_, &f)| f).map(|(c, _)| c);
    let c = matched_a.zip(matched_b).filter(|(x, y)| x != y).count();

    let m_f = m as f64;
    (m_f / a.len() as f64 + m_f / b.len() as f64 + (2.0 * m_f - c as f64) / (2.0 * m_f)) / 3.0
}

/// Jaro similarity between a ground-truth plate string and a recognized one.
pub fn jaro_similarity(s1: &PlateString, s2: &PlateString) -> f64 {
    jaro(&s1.chars, &s2.chars)
}

/// Minimum insert/delete/substitute count between two strings.
pub fn levenshtein(s1: &str, s2: &str) -> usize {
    let a: Vec<char> = s1.chars().collect();
    let b: Vec<char> = s2.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn levenshtein_plates(s1: &PlateString, s2: &PlateString) -> usize {
    levenshtein(&s1.chars, &s2.chars)
}

/// Cosine similarity of the embeddings of two face crops. Embedder
/// failures (no face, zero-norm embedding) propagate as errors so the
/// caller can exclude and log the record.
pub fn face_similarity(a: &ImageRef, b: &ImageRef, embedder: &dyn FaceEmbedder) -> Result<f64> {
    let ea = embedder.embed(a)?;
    let eb = embedder.embed(b)?;
    cosine_similarity(&ea, &eb)
}

/// Face-recognition degradation target: similarity of the reference query
/// to the database image minus similarity of the compressed query to the
/// database image. Not clamped; compression can accidentally help.
pub fn face_delta(
    reference: &ImageRef,
    compressed: &ImageRef,
    database: &ImageRef,
    embedder: &dyn FaceEmbedder,
) -> Result<f64> {
    let e_db = embedder.embed(database)?;
    let e_ref = embedder.embed(reference)?;
    let e_compr = embedder.embed(compressed)?;
    Ok(cosine_similarity(&e_ref, &e_db)? - cosine_similarity(&e_compr, &e_db)?)
}

/// Mean Jaro similarity over matched (GT, recognized) plate pairs; `None`
/// when the frame has no matched plates.
pub fn plate_frame_score(matched_plates: &[(PlateString, PlateString)]) -> Option<f64> {
    if matched_plates.is_empty() {
        return None;
    }
    let sum: f64 = matched_plates
        .iter()
        .map(|(gt, rec)| jaro_similarity(gt, rec))
        .sum();
    Some(sum / matched_plates.len() as f64)
}

/// One face-recognition degradation row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FacePairRecord {
    pub person: String,
    pub database_path: String,
    pub reference_path: String,
    pub compressed_path: String,
    pub r_ref: f64,
    pub r_compr: f64,
    pub f_delta: f64,
}

impl FacePairRecord {
    pub fn new(
        person: impl Into<String>,
        database_path: impl Into<String>,
        reference_path: impl Into<String>,
        compressed_path: impl Into<String>,
        r_ref: f64,
        r_compr: f64,
    ) -> Self {
        Self {
            person: person.into(),
            database_path: database_path.into(),
            reference_path: reference_path.into(),
            compressed_path: compressed_path.into(),
            r_ref,
            r_compr,
            f_delta: r_ref - r_compr,
        }
    }
}

/// One plate-recognition degradation row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlateTargetRecord {
    pub frame_id: String,
    pub plate_id: String,
    pub gt_string: PlateString,
    pub recognized_string: PlateString,
    pub jaro: f64,
}

impl PlateTargetRecord {
    pub fn new(
        frame_id: impl Into<String>,
        plate_id: impl Into<String>,
        gt_string: PlateString,
        recognized_string: PlateString,
    ) -> Self {
        let jaro = jaro_similarity(&gt_string, &recognized_string);
        Self {
            frame_id: frame_id.into(),
            plate_id: plate_id.into(),
            gt_string,
            recognized_string,
            jaro,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Alphabet;
    use proptest::prelude::*;

    fn plate(s: &str) -> PlateString {
        PlateString::new(s, 1.0, &Alphabet::default()).unwrap()
    }

    #[test]
    fn jaro_identical() {
        assert_eq!(jaro("ABC", "ABC"), 1.0);
    }

    #[test]
    fn jaro_no_common_characters() {
        assert_eq!(jaro("ABC", "XYZ"), 0.0);
    }

    #[test]
    fn jaro_martha_marhta() {
        // m = 6, t = 1: (1 + 1 + 5/6) / 3
        assert!((jaro("MARTHA", "MARHTA") - 17.0 / 18.0).abs() < 1e-12);
    }

    #[test]
    fn jaro_both_empty_is_zero() {
        // m = 0 branch applied literally
        assert_eq!(jaro("", ""), 0.0);
        assert_eq!(jaro("", "A"), 0.0);
    }

    #[test]
    fn jaro_known_values() {
        // DIXON/DICKSONX: m = 4, t = 0
        let expected = (4.0 / 5.0 + 4.0 / 8.0 + 1.0) / 3.0;
        assert!((jaro("DIXON", "DICKSONX") - expected).abs() < 1e-12);
    }

    #[test]
    fn levenshtein_basics() {
        assert_eq!(levenshtein("AB12", "AB12"), 0);
        assert_eq!(levenshtein("", "ABC"), 3);
        assert_eq!(levenshtein("KITTEN", "SITTING"), 3);
    }

    #[test]
    fn plate_frame_score_examples() {
        assert_eq!(
            plate_frame_score(&[(plate("AB123"), plate("AB123"))]),
            Some(1.0)
        );
        let pairs = [
            (plate("ABC"), plate("ABC")),
            (plate("ABC"), plate("XYZ")),
        ];
        assert_eq!(plate_frame_score(&pairs), Some(0.5));
        assert_eq!(plate_frame_score(&[]), None);
    }

    /// Definitional re-implementation used as an oracle: builds explicit
    /// match lists with an exclusive scan over the window, then counts
    /// transpositions from the two matched sequences.
    pub fn jaro_oracle(s1: &str, s2: &str) -> f64 {
        let a: Vec<char> = s1.chars().collect();
        let b: Vec<char> = s2.chars().collect();
        if a.is_empty() || b.is_empty() {
            return 0.0;
        }
        let window = (a.len().max(b.len()) / 2).saturating_sub(1) as isize;
        let mut taken = vec![false; b.len()];
        let mut seq_a = Vec::new();
        let mut seq_b_idx = Vec::new();
        for i in 0..a.len() {
            for j in 0..b.len() {
                let dist = (i as isize - j as isize).abs();
                if dist <= window && !taken[j] && a[i] == b[j] {
                    taken[j] = true;
                    seq_a.push(a[i]);
                    seq_b_idx.push(j);
                    break;
                }
            }
        }
        let m = seq_a.len();
        if m == 0 {
            return 0.0;
        }
        let mut seq_b: Vec<(usize, char)> =
            seq_b_idx.iter().map(|&j| (j, b[j])).collect();
        seq_b.sort_by_key(|(j, _)| *j);
        let transp_raw = seq_a
            .iter()
            .zip(seq_b.iter())
            .filter(|(x, (_, y))| *x != y)
            .count();
        let m_f = m as f64;
        (m_f / a.len() as f64
            + m_f / b.len() as f64
            + (m_f - transp_raw as f64 / 2.0) / m_f)
            / 3.0
    }

    proptest! {
        #[test]
        fn jaro_symmetric_and_bounded(
            a in "[A-F0-3]{0,6}",
            b in "[A-F0-3]{0,6}",
        ) {
            let ab = jaro(&a, &b);
            let ba = jaro(&b, &a);
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn jaro_is_one_iff_equal_nonempty(
            a in "[A-F0-3]{0,6}",
            b in "[A-F0-3]{0,6}",
        ) {
            let v = jaro(&a, &b);
            if v == 1.0 {
                prop_assert_eq!(&a, &b);
                prop_assert!(!a.is_empty());
            }
            if a == b && !a.is_empty() {
                prop_assert_eq!(v, 1.0);
            }
        }

        #[test]
        fn jaro_matches_oracle(
            a in "[A-F0-3]{0,6}",
            b in "[A-F0-3]{0,6}",
        ) {
            prop_assert!((jaro(&a, &b) - jaro_oracle(&a, &b)).abs() < 1e-12);
        }

        #[test]
        fn levenshtein_triangle_and_length_bound(
            a in "[A-D]{0,8}",
            b in "[A-D]{0,8}",
            c in "[A-D]{0,8}",
        ) {
            let ab = levenshtein(&a, &b);
            let bc = levenshtein(&b, &c);
            let ac = levenshtein(&a, &c);
            prop_assert!(ac <= ab + bc);
            let len_diff = a.chars().count().abs_diff(b.chars().count());
            prop_assert!(ab >= len_diff);
        }
    }
}
