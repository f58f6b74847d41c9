//! Divide-and-conquer Shapley attribution for two-input classifiers.
//!
//! Modality scores come from the two-player game {image, speech} where an
//! absent modality is replaced by the baseline. Each modality's score is
//! then pushed down a binary region tree: at every node the two halves play
//! a two-player game inside the node (everything outside the node keeps its
//! original values), and the raw child scores are adjusted so that they add
//! up to the parent's score.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::encode_pgm;
use crate::shapley::two_player_shapley;
use crate::tensor::{argmax, Tensor};

/// A black-box two-input classifier. Implementations must be safe to call
/// from several threads at once.
pub trait Predictor: Sync {
    /// Class probabilities for one unbatched image `(rows, cols, 3)` and
    /// spectrogram `(rows, cols, 1)`.
    fn predict(&self, image: &Tensor, speech: &Tensor) -> Result<Vec<f64>>;

    /// Input extent the model was built for, if it has a fixed one.
    fn input_extent(&self) -> Option<(usize, usize)> {
        None
    }
}

/// Adapts a closure into a [`Predictor`].
pub struct FnPredictor<F>(pub F);

impl<F> Predictor for FnPredictor<F>
where
    F: Fn(&Tensor, &Tensor) -> Result<Vec<f64>> + Sync,
{
    fn predict(&self, image: &Tensor, speech: &Tensor) -> Result<Vec<f64>> {
        (self.0)(image, speech)
    }
}

/// Axis-aligned rectangle over the first two axes of a raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Region {
    pub row: usize,
    pub col: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Region {
    pub fn new(row: usize, col: usize, rows: usize, cols: usize) -> Self {
        Region { row, col, rows, cols }
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Region::new(0, 0, rows, cols)
    }

    pub fn area(&self) -> usize {
        self.rows * self.cols
    }

    /// Halves along the longer side (rows on ties); the first half takes the
    /// extra pixel of an odd length. `None` for single pixels.
    pub fn split(&self) -> Option<(Region, Region)> {
        if self.area() <= 1 {
            return None;
        }
        if self.rows >= self.cols {
            let top = self.rows.div_ceil(2);
            Some((
                Region::new(self.row, self.col, top, self.cols),
                Region::new(self.row + top, self.col, self.rows - top, self.cols),
            ))
        } else {
            let left = self.cols.div_ceil(2);
            Some((
                Region::new(self.row, self.col, self.rows, left),
                Region::new(self.row, self.col + left, self.rows, self.cols - left),
            ))
        }
    }
}

/// Copy of `input` with `region` set to `baseline` on every channel. The
/// input must be `(rows, cols)` or `(rows, cols, channels)`.
pub fn mask_region(input: &Tensor, region: Region, baseline: f64) -> Result<Tensor> {
    let shape = input.shape();
    if shape.len() != 2 && shape.len() != 3 {
        return Err(Error::shape("mask_region", "rank", "2 or 3", shape.len()));
    }
    let (rows, cols) = (shape[0], shape[1]);
    let channels = shape.get(2).copied().unwrap_or(1);
    if region.row + region.rows > rows || region.col + region.cols > cols {
        return Err(Error::invalid(
            "region",
            format!("{region:?} exceeds a {rows}x{cols} raster"),
        ));
    }
    let mut out = input.clone();
    let data = out.data_mut();
    for r in region.row..region.row + region.rows {
        let start = (r * cols + region.col) * channels;
        data[start..start + region.cols * channels].fill(baseline);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Speech,
}

/// Modality-level quantities. `pred_1` keeps only the image, `pred_2` only
/// the speech input; all four predictions are for class `arg_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModalityScores {
    pub arg_max: usize,
    pub pred_f: f64,
    pub pred_b: f64,
    pub pred_1: f64,
    pub pred_2: f64,
    pub score_1: f64,
    pub score_2: f64,
}

impl ModalityScores {
    /// Scores from the four anchor predictions.
    pub fn from_predictions(arg_max: usize, pred_f: f64, pred_b: f64, pred_1: f64, pred_2: f64) -> Self {
        // Players: image (a) and speech (b).
        let (score_1, score_2) = two_player_shapley(pred_b, pred_1, pred_2, pred_f);
        ModalityScores {
            arg_max,
            pred_f,
            pred_b,
            pred_1,
            pred_2,
            score_1,
            score_2,
        }
    }
}

pub(crate) fn check_probabilities(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::NotAProbability("empty output".into()));
    }
    if let Some(v) = p.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0 + 1e-9) {
        return Err(Error::NotAProbability(format!("entry {v}")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::NotAProbability(format!("entries sum to {sum}")));
    }
    Ok(())
}

fn predict_checked(model: &dyn Predictor, image: &Tensor, speech: &Tensor) -> Result<Vec<f64>> {
    let p = model.predict(image, speech)?;
    check_probabilities(&p)?;
    Ok(p)
}

fn check_inputs(model: &dyn Predictor, image: &Tensor, speech: &Tensor) -> Result<(usize, usize)> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::shape(
            "attribution",
            "image shape",
            "(rows, cols, 3)",
            format!("{s:?}"),
        ));
    }
    let (rows, cols) = (s[0], s[1]);
    if speech.shape() != [rows, cols, 1] {
        return Err(Error::shape(
            "attribution",
            "speech shape",
            format!("[{rows}, {cols}, 1]"),
            format!("{:?}", speech.shape()),
        ));
    }
    if let Some(extent) = model.input_extent() {
        if extent != (rows, cols) {
            return Err(Error::shape(
                "attribution",
                "input extent",
                format!("{extent:?}"),
                format!("{:?}", (rows, cols)),
            ));
        }
    }
    Ok((rows, cols))
}

/// Two-player modality scores with absent modalities replaced by zeros.
pub fn modality_scores(model: &dyn Predictor, image: &Tensor, speech: &Tensor) -> Result<ModalityScores> {
    modality_scores_with_baseline(model, image, speech, 0.0)
}

pub fn modality_scores_with_baseline(
    model: &dyn Predictor,
    image: &Tensor,
    speech: &Tensor,
    baseline: f64,
) -> Result<ModalityScores> {
    check_inputs(model, image, speech)?;
    let blank_image = Tensor::full(image.shape(), baseline);
    let blank_speech = Tensor::full(speech.shape(), baseline);
    let full = predict_checked(model, image, speech)?;
    let arg_max = argmax(&full);
    let pick = |p: Vec<f64>| -> Result<f64> {
        p.get(arg_max)
            .copied()
            .ok_or_else(|| Error::NotAProbability(format!("output has {} classes, expected {}", p.len(), full.len())))
    };
    let pred_b = pick(predict_checked(model, &blank_image, &blank_speech)?)?;
    let pred_1 = pick(predict_checked(model, image, &blank_speech)?)?;
    let pred_2 = pick(predict_checked(model, &blank_image, speech)?)?;
    Ok(ModalityScores::from_predictions(
        arg_max,
        full[arg_max],
        pred_b,
        pred_1,
        pred_2,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttributionConfig {
    /// Recursion depth of the region tree.
    pub times: usize,
    /// Value standing in for an absent pixel.
    pub baseline: f64,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig {
            times: 6,
            baseline: 0.0,
        }
    }
}

/// One node of a region tree.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionNode {
    pub region: Region,
    pub depth: usize,
    /// Final score after adjustment; the root holds the modality score.
    pub score: f64,
    /// Two-player score before adjustment (`None` at the root).
    pub raw: Option<f64>,
    /// Indices of the two children in the tree vector.
    pub children: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attribution {
    pub scores: ModalityScores,
    /// Per-pixel score density, `(rows, cols)`.
    pub shap_image: Tensor,
    pub shap_speech: Tensor,
    pub image_tree: Vec<RegionNode>,
    pub speech_tree: Vec<RegionNode>,
    pub eval_count: usize,
    pub effective_depth: usize,
}

/// Scalar summary of an attribution run.
#[derive(Debug, Clone, Serialize)]
pub struct AttributionSummary {
    pub arg_max: usize,
    pub pred_f: f64,
    pub pred_b: f64,
    pub pred_1: f64,
    pub pred_2: f64,
    pub score_1: f64,
    pub score_2: f64,
    pub eval_count: usize,
    pub effective_depth: usize,
}

impl Attribution {
    pub fn summary(&self) -> AttributionSummary {
        let s = &self.scores;
        AttributionSummary {
            arg_max: s.arg_max,
            pred_f: s.pred_f,
            pred_b: s.pred_b,
            pred_1: s.pred_1,
            pred_2: s.pred_2,
            score_1: s.score_1,
            score_2: s.score_2,
            eval_count: self.eval_count,
            effective_depth: self.effective_depth,
        }
    }

    pub fn map(&self, modality: Modality) -> &Tensor {
        match modality {
            Modality::Image => &self.shap_image,
            Modality::Speech => &self.shap_speech,
        }
    }

    pub fn tree(&self, modality: Modality) -> &[RegionNode] {
        match modality {
            Modality::Image => &self.image_tree,
            Modality::Speech => &self.speech_tree,
        }
    }
}

/// Splits `parent` between two children given their raw scores. The
/// discrepancy `parent - (a + b)` is shared in proportion to `|raw|`, so
/// children with a zero raw score stay at zero and already consistent
/// scores pass through unchanged. Both raw scores zero: equal split.
pub fn adjust_children(parent: f64, raw_a: f64, raw_b: f64) -> (f64, f64) {
    let weight = raw_a.abs() + raw_b.abs();
    let a = if weight == 0.0 {
        0.5 * parent
    } else {
        raw_a + (parent - (raw_a + raw_b)) * (raw_a.abs() / weight)
    };
    (a, parent - a)
}

struct Job {
    modality: Modality,
    zeroed: Region,
}

/// Divide-and-conquer attribution. The result is identical for any rayon
/// pool size: model calls run in parallel but every reduction happens in a
/// fixed order.
pub fn dnc_shap(
    model: &dyn Predictor,
    image: &Tensor,
    speech: &Tensor,
    config: &AttributionConfig,
) -> Result<Attribution> {
    let (rows, cols) = check_inputs(model, image, speech)?;
    let scores = modality_scores_with_baseline(model, image, speech, config.baseline)?;
    let class = scores.arg_max;
    let root = Region::full(rows, cols);

    // v(nothing zeroed) is pred_f; zeroing a whole modality gives pred_2 or pred_1.
    let mut cache: HashMap<(Modality, Region), f64> = HashMap::new();
    cache.insert((Modality::Image, root), scores.pred_2);
    cache.insert((Modality::Speech, root), scores.pred_1);
    let mut eval_count = 4;

    let mut trees = [
        vec![RegionNode {
            region: root,
            depth: 0,
            score: scores.score_1,
            raw: None,
            children: None,
        }],
        vec![RegionNode {
            region: root,
            depth: 0,
            score: scores.score_2,
            raw: None,
            children: None,
        }],
    ];
    let modalities = [Modality::Image, Modality::Speech];
    let mut frontier: [Vec<usize>; 2] = [vec![0], vec![0]];

    for depth in 0..config.times {
        // Nodes to split at this level, per modality, in tree order.
        let mut splits: Vec<(usize, usize, Region, Region)> = Vec::new();
        for (m, nodes) in frontier.iter().enumerate() {
            for &idx in nodes {
                if let Some((a, b)) = trees[m][idx].region.split() {
                    splits.push((m, idx, a, b));
                }
            }
        }
        if splits.is_empty() {
            break;
        }
        let jobs: Vec<Job> = splits
            .iter()
            .flat_map(|&(m, _, a, b)| {
                [a, b].map(|zeroed| Job {
                    modality: modalities[m],
                    zeroed,
                })
            })
            .filter(|job| !cache.contains_key(&(job.modality, job.zeroed)))
            .collect();
        let values: Vec<Result<f64>> = jobs
            .par_iter()
            .map(|job| {
                let p = match job.modality {
                    Modality::Image => {
                        predict_checked(model, &mask_region(image, job.zeroed, config.baseline)?, speech)?
                    }
                    Modality::Speech => {
                        predict_checked(model, image, &mask_region(speech, job.zeroed, config.baseline)?)?
                    }
                };
                p.get(class)
                    .copied()
                    .ok_or_else(|| Error::NotAProbability(format!("output has {} classes", p.len())))
            })
            .collect();
        eval_count += jobs.len();
        for (job, value) in jobs.iter().zip(values) {
            cache.insert((job.modality, job.zeroed), value?);
        }

        let mut next: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        for (m, parent, a, b) in splits {
            let key = |r: Region| (modalities[m], r);
            let v_empty = cache[&key(trees[m][parent].region)];
            let v_a = cache[&key(b)]; // only half a present
            let v_b = cache[&key(a)];
            let (raw_a, raw_b) = two_player_shapley(v_empty, v_a, v_b, scores.pred_f);
            let (score_a, score_b) = adjust_children(trees[m][parent].score, raw_a, raw_b);
            let first = trees[m].len();
            for (region, score, raw) in [(a, score_a, raw_a), (b, score_b, raw_b)] {
                trees[m].push(RegionNode {
                    region,
                    depth: depth + 1,
                    score,
                    raw: Some(raw),
                    children: None,
                });
            }
            trees[m][parent].children = Some((first, first + 1));
            next[m].extend([first, first + 1]);
        }
        frontier = next;
    }

    let paint = |tree: &[RegionNode]| {
        let mut map = Tensor::zeros(&[rows, cols]);
        let data = map.data_mut();
        for node in tree.iter().filter(|n| n.children.is_none()) {
            let density = node.score / node.region.area() as f64;
            let r = node.region;
            for row in r.row..r.row + r.rows {
                data[row * cols + r.col..row * cols + r.col + r.cols].fill(density);
            }
        }
        map
    };
    let effective_depth = trees.iter().flatten().map(|n| n.depth).max().unwrap_or(0);
    let [image_tree, speech_tree] = trees;
    Ok(Attribution {
        scores,
        shap_image: paint(&image_tree),
        shap_speech: paint(&speech_tree),
        image_tree,
        speech_tree,
        eval_count,
        effective_depth,
    })
}

/// Grayscale PGM rendering: min maps to 0, max to 255 (floor of the linear
/// scale); a constant map renders as 128.
pub fn render_heatmap(map: &Tensor) -> Result<Vec<u8>> {
    if map.rank() != 2 {
        return Err(Error::shape("render_heatmap", "rank", 2, map.rank()));
    }
    if !map.all_finite() {
        return Err(Error::NonFinite {
            context: "heatmap input".into(),
        });
    }
    let (lo, hi) = map
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let pixels: Vec<u8> = if hi > lo {
        map.data()
            .iter()
            .map(|&v| (((v - lo) / (hi - lo)) * 255.0).floor().clamp(0.0, 255.0) as u8)
            .collect()
    } else {
        vec![128; map.len()]
    };
    encode_pgm(map.shape()[1], map.shape()[0], &pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn mask_region_cases() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(mask_region(&x, Region::full(2, 2), 0.0).unwrap().data(), &[0.0; 4]);
        assert_eq!(mask_region(&x, Region::new(0, 0, 0, 0), 0.0).unwrap(), x);
        assert_eq!(
            mask_region(&x, Region::new(0, 0, 1, 1), 0.0).unwrap().data(),
            &[0.0, 2.0, 3.0, 4.0]
        );
        assert!(mask_region(&x, Region::new(1, 1, 2, 1), 0.0).is_err());
        let rgb = Tensor::full(&[2, 2, 3], 1.0);
        let m = mask_region(&rgb, Region::new(1, 0, 1, 2), 0.5).unwrap();
        assert_eq!(&m.data()[..6], &[1.0; 6]);
        assert_eq!(&m.data()[6..], &[0.5; 6]);
    }

    #[test]
    fn split_rule() {
        let r = Region::full(5, 5);
        assert_eq!(r.split().unwrap(), (Region::new(0, 0, 3, 5), Region::new(3, 0, 2, 5)));
        let wide = Region::new(0, 0, 2, 7);
        assert_eq!(
            wide.split().unwrap(),
            (Region::new(0, 0, 2, 4), Region::new(0, 4, 2, 3))
        );
        assert!(Region::new(3, 3, 1, 1).split().is_none());
    }

    #[test]
    fn algorithm_fixture() {
        let s = ModalityScores::from_predictions(0, 0.9, 0.3, 0.7, 0.5);
        assert!((s.score_1 - 0.4).abs() < 1e-12);
        assert!((s.score_2 - 0.2).abs() < 1e-12);
    }

    #[test]
    fn adjust_children_properties() {
        assert_eq!(adjust_children(1.0, 0.0, 0.0), (0.5, 0.5));
        let (a, b) = adjust_children(0.3, 0.2, 0.1);
        assert!((a - 0.2).abs() < 1e-15 && (b - 0.1).abs() < 1e-15);
        let (a, b) = adjust_children(0.8, 0.0, 0.4);
        assert_eq!(a, 0.0);
        assert_eq!(b, 0.8);
        let (a, b) = adjust_children(0.5, 1.0, -1.0);
        assert_eq!(a + b, 0.5);
    }

    #[test]
    fn heatmap_fixtures() {
        let pgm = render_heatmap(&t(&[2, 2], &[0.0, 1.0, 0.5, 0.25])).unwrap();
        assert!(pgm.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&pgm[pgm.len() - 4..], &[0, 255, 127, 63]);
        let flat = render_heatmap(&Tensor::full(&[3, 2], -4.0)).unwrap();
        assert_eq!(&flat[flat.len() - 6..], &[128; 6]);
        assert!(render_heatmap(&t(&[1, 2], &[0.0, f64::NAN])).is_err());
    }
}
