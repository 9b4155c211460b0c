//! Feature slicing and mean pooling of frame embeddings into unit vectors.

use std::ops::Range;

use crate::dataio::{AnnotationRow, FrameEmbeddings};
use crate::error::{Error, Result};

/// Time/period ratios within this distance of an integer are snapped to it,
/// so that e.g. 0.10 / 0.02 counts as frame boundary 5 rather than 5.000...1.
const BOUNDARY_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct UnitEmbedding {
    pub unit_id: String,
    pub vector: Vec<f64>,
    pub n_frames_pooled: usize,
}

fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= BOUNDARY_EPS * r.abs().max(1.0) {
        r
    } else {
        x
    }
}

/// Frame range `[floor(start / period), ceil(end / period))`, clipped to the
/// utterance. A span that clips to nothing falls back to the nearest frame.
pub fn slice_frames(frames: &FrameEmbeddings, start_s: f64, end_s: f64) -> Result<Range<usize>> {
    if !(start_s >= 0.0 && start_s < end_s && end_s.is_finite()) {
        return Err(Error::Validation(format!(
            "invalid span [{start_s}, {end_s})"
        )));
    }
    let period = frames.frame_period_s;
    let n = frames.n_frames();
    if start_s >= frames.duration_s() + period {
        return Err(Error::OutOfRange(format!(
            "span starts at {start_s}s but utterance {} ends at {}s",
            frames.utterance_id,
            frames.duration_s()
        )));
    }
    let i0 = snap(start_s / period).floor() as usize;
    let i1 = snap(end_s / period).ceil() as usize;
    let (i0, i1) = (i0.min(n), i1.min(n));
    if i0 >= i1 {
        let nearest = i0.min(n - 1);
        return Ok(nearest..nearest + 1);
    }
    Ok(i0..i1)
}

/// Mean of the frames inside a unit's span.
pub fn pool_unit(frames: &FrameEmbeddings, unit: &AnnotationRow) -> Result<UnitEmbedding> {
    let range = slice_frames(frames, unit.start_s, unit.end_s)?;
    Ok(UnitEmbedding {
        unit_id: unit.unit_id.clone(),
        vector: mean_rows(frames, range.clone()),
        n_frames_pooled: range.len(),
    })
}

fn mean_rows(frames: &FrameEmbeddings, range: Range<usize>) -> Vec<f64> {
    let mut acc = vec![0.0f64; frames.dim()];
    let count = range.len() as f64;
    for i in range {
        for (a, &v) in acc.iter_mut().zip(frames.row(i)) {
            *a += v as f64;
        }
    }
    acc.iter_mut().for_each(|a| *a /= count);
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn frames(rows: &[Vec<f32>]) -> FrameEmbeddings {
        FrameEmbeddings::from_rows("u", "L", 0.02, rows).unwrap()
    }

    fn unit(start: f64, end: f64) -> AnnotationRow {
        AnnotationRow {
            unit_id: "x".into(),
            utterance_id: "u".into(),
            start_s: start,
            end_s: end,
            label: "a".into(),
            aux_labels: BTreeMap::new(),
        }
    }

    #[test]
    fn exact_multiples() {
        let f = frames(&vec![vec![0.0]; 10]);
        assert_eq!(slice_frames(&f, 0.04, 0.10).unwrap(), 2..5);
    }

    #[test]
    fn sub_frame_span_maps_to_one_frame() {
        // 0.015/0.02 = 0.75 -> floor 0; 0.018/0.02 = 0.9 -> ceil 1
        let f = frames(&vec![vec![0.0]; 10]);
        assert_eq!(slice_frames(&f, 0.015, 0.018).unwrap(), 0..1);
    }

    #[test]
    fn span_past_end_is_out_of_range() {
        let f = frames(&vec![vec![0.0]; 10]);
        assert!(matches!(slice_frames(&f, 0.5, 0.6), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn clipped_span_falls_back_to_last_frame() {
        let f = frames(&vec![vec![0.0]; 10]);
        // starts inside the one-period grace zone after the last frame
        assert_eq!(slice_frames(&f, 0.205, 0.23).unwrap(), 9..10);
        assert_eq!(slice_frames(&f, 0.19, 0.5).unwrap(), 9..10);
    }

    #[test]
    fn empty_span_rejected() {
        let f = frames(&vec![vec![0.0]; 10]);
        assert!(slice_frames(&f, 0.1, 0.1).is_err());
    }

    #[test]
    fn mean_of_two_frames() {
        let f = frames(&[vec![1.0, 1.0], vec![3.0, 3.0]]);
        let u = pool_unit(&f, &unit(0.0, 0.04)).unwrap();
        assert_eq!(u.vector, vec![2.0, 2.0]);
        assert_eq!(u.n_frames_pooled, 2);
    }

    #[test]
    fn single_frame_verbatim() {
        let f = frames(&[vec![1.5, -2.25], vec![3.0, 3.0]]);
        let u = pool_unit(&f, &unit(0.021, 0.039)).unwrap();
        assert_eq!(u.vector, vec![3.0, 3.0]);
        assert_eq!(u.n_frames_pooled, 1);
    }

    proptest! {
        #[test]
        fn pooling_is_linear_and_bounded(
            data in proptest::collection::vec(-10.0f32..10.0, 24),
            start in 0usize..6, len in 1usize..6,
        ) {
            let rows: Vec<Vec<f32>> = data.chunks(3).map(<[f32]>::to_vec).collect();
            let f = frames(&rows);
            let u = unit(start as f64 * 0.02, (start + len) as f64 * 0.02);
            let pooled = pool_unit(&f, &u).unwrap();
            let range = slice_frames(&f, u.start_s, u.end_s).unwrap();
            for d in 0..3 {
                let col: Vec<f64> = range.clone().map(|i| f.row(i)[d] as f64).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(pooled.vector[d] >= lo - 1e-9 && pooled.vector[d] <= hi + 1e-9);
            }
            let scaled: Vec<Vec<f32>> = rows.iter().map(|r| r.iter().map(|v| v * 2.0).collect()).collect();
            let p2 = pool_unit(&frames(&scaled), &u).unwrap();
            for (a, b) in p2.vector.iter().zip(&pooled.vector) {
                prop_assert!((a - 2.0 * b).abs() < 1e-9);
            }
            let mut reversed = rows.clone();
            reversed[range.clone()].reverse();
            let p3 = pool_unit(&frames(&reversed), &u).unwrap();
            for (a, b) in p3.vector.iter().zip(&pooled.vector) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
