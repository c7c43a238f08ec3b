//! Reproducible test fixtures: a handwriting-like 28x28 glyph dataset and
//! networks with planted redundant structures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{build_network, evaluate_accuracy, train_with, Dataset, Layer, Network, Split, TrainConfig};
use crate::sa::{Action, LayerAction};
use crate::schemes::{propagate_channels, MaskSet};
use crate::tensor::Tensor;

/// Parameters of the glyph generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GlyphSpec {
    pub size: usize,
    /// Strokes per class template.
    pub strokes: usize,
    /// Standard deviation of per-sample endpoint displacement, in pixels.
    pub wobble: f64,
    /// Maximum global translation, in pixels.
    pub shift: f64,
    pub noise: f64,
    /// Probability of an extra random stroke unrelated to the class.
    pub clutter: f64,
}

impl Default for GlyphSpec {
    fn default() -> Self {
        Self {
            size: 28,
            strokes: 3,
            wobble: 1.5,
            shift: 2.0,
            noise: 0.15,
            clutter: 0.5,
        }
    }
}

type Segment = [(f64, f64); 2];

fn render(img: &mut [f64], size: usize, seg: &Segment, width: f64) {
    let [(y0, x0), (y1, x1)] = *seg;
    let (dy, dx) = (y1 - y0, x1 - x0);
    let len2 = (dy * dy + dx * dx).max(1e-9);
    for y in 0..size {
        for x in 0..size {
            let (py, px) = (y as f64 - y0, x as f64 - x0);
            let t = ((py * dy + px * dx) / len2).clamp(0.0, 1.0);
            let (ey, ex) = (py - t * dy, px - t * dx);
            let d2 = ey * ey + ex * ex;
            let v = (-d2 / (2.0 * width * width)).exp();
            let p = &mut img[y * size + x];
            *p = p.max(v);
        }
    }
}

/// Single-channel glyph images: every class is a template of random
/// strokes; samples jitter the endpoints, translate, vary the stroke width,
/// sometimes add a clutter stroke, and add pixel noise. Labels are uniform.
pub fn glyph_dataset(seed: u64, n: usize, classes: usize, spec: &GlyphSpec) -> Result<Dataset> {
    if classes < 2 || n < classes || spec.size < 8 {
        return Err(Error::Config("glyph dataset needs classes >= 2, n >= classes, size >= 8".into()));
    }
    let s = spec.size as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let margin = 0.18 * s;
    let point = |rng: &mut ChaCha8Rng| (rng.gen_range(margin..s - margin), rng.gen_range(margin..s - margin));
    let templates: Vec<Vec<Segment>> = (0..classes)
        .map(|_| (0..spec.strokes).map(|_| [point(&mut rng), point(&mut rng)]).collect())
        .collect();
    let wobble = Normal::new(0.0, spec.wobble.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let plane = spec.size * spec.size;
    let mut data = Vec::with_capacity(n * plane);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.gen_range(0..classes);
        let (sy, sx) = if spec.shift > 0.0 {
            (rng.gen_range(-spec.shift..=spec.shift), rng.gen_range(-spec.shift..=spec.shift))
        } else {
            (0.0, 0.0)
        };
        let width = rng.gen_range(0.7..1.3);
        let mut img = vec![0.0; plane];
        for seg in &templates[label] {
            let moved = seg.map(|(y, x)| (y + sy + wobble.sample(&mut rng), x + sx + wobble.sample(&mut rng)));
            render(&mut img, spec.size, &moved, width);
        }
        if rng.gen_bool(spec.clutter.clamp(0.0, 1.0)) {
            let seg = [point(&mut rng), point(&mut rng)];
            render(&mut img, spec.size, &seg, width);
        }
        data.extend(img.into_iter().map(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0)));
        labels.push(label);
    }
    Dataset::new(
        Tensor::new(vec![n, 1, spec.size, spec.size], data)?,
        labels,
        classes,
        Split::Train,
    )
}

/// Train and test glyph splits drawn from the same templates.
pub fn glyph_splits(seed: u64, n_train: usize, n_test: usize, classes: usize, spec: &GlyphSpec) -> Result<(Dataset, Dataset)> {
    glyph_dataset(seed, n_train + n_test, classes, spec)?.split_test(n_test)
}

/// A trained network whose conv layers carry planted dead structures.
#[derive(Debug, Clone)]
pub struct Planted {
    /// Dense-shaped network. Planted filters have tiny weights and zero
    /// bias, and every weight reading their channels is exactly zero, so
    /// they do not influence the output. Planted columns are exactly zero.
    pub network: Network,
    /// Masks removing exactly the planted structures.
    pub redundant: MaskSet,
    /// Filter-only action whose magnitude pruning removes exactly the
    /// planted filters.
    pub optimal: Action,
    /// Test accuracy of `network` (equal to that with `redundant` applied).
    pub accuracy: f64,
}

/// Trains `arch` with the first `keep` filters of every conv layer active
/// (fraction `keep_fraction`) and a random `column_keep` fraction of the
/// remaining live columns, then fills the other filters with weights of
/// norm about `tiny`.
pub fn planted_network(
    arch: &str,
    train: &Dataset,
    test: &Dataset,
    keep_fraction: f64,
    column_keep: f64,
    tiny: f64,
    config: &TrainConfig,
) -> Result<Planted> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0 && column_keep > 0.0 && column_keep <= 1.0) {
        return Err(Error::Config("keep fractions must be in (0, 1]".into()));
    }
    let mut net = build_network(arch, train.image_shape(), train.classes, config.seed)?;
    let mut masks = MaskSet::dense(&net);
    let mut layers = Vec::new();
    for li in net.prunable_layers() {
        let m = masks.layers.get_mut(&li).expect("dense masks cover conv layers");
        let n = m.filters.len();
        let keep = ((n as f64 * keep_fraction).round() as usize).clamp(1, n);
        m.filters.iter_mut().skip(keep).for_each(|f| *f = false);
        let rate = n as f64 / keep as f64;
        layers.push(LayerAction { layer: li, rate, split: 1.0 });
    }
    propagate_channels(&net, &mut masks)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    for li in net.prunable_layers() {
        let m = masks.layers.get_mut(&li).expect("dense masks cover conv layers");
        let live: Vec<usize> = (0..m.columns.len()).filter(|&c| m.columns[c]).collect();
        let keep = ((live.len() as f64 * column_keep).round() as usize).clamp(1, live.len());
        let kept = rand::seq::index::sample(&mut rng, live.len(), keep).into_vec();
        for (k, &c) in live.iter().enumerate() {
            m.columns[c] = kept.contains(&k);
        }
    }
    masks.enforce(&mut net)?;
    train_with(&mut net, train, config, None, Some(&masks))?;
    for li in net.prunable_layers() {
        let m = &masks.layers[&li];
        let cols = m.columns.len();
        let Some((w, _)) = net.layers[li].params_mut() else { continue };
        let scale = tiny / (cols as f64).sqrt();
        for (r, row) in w.data_mut().chunks_mut(cols).enumerate() {
            if m.filters[r] {
                continue;
            }
            // Only live columns: the others read planted channels or are
            // planted themselves.
            for (c, v) in row.iter_mut().enumerate() {
                if m.columns[c] {
                    *v = scale * rng.gen_range(-1.7..1.7);
                }
            }
        }
    }
    let accuracy = evaluate_accuracy(&net, test)?;
    Ok(Planted {
        network: net,
        redundant: masks,
        optimal: Action { layers },
        accuracy,
    })
}

/// Indices of the conv layers with planted filters, with their counts of
/// real (non-planted) filters.
pub fn planted_counts(planted: &Planted) -> Vec<(usize, usize)> {
    planted
        .network
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, Layer::Conv(_)))
        .map(|(i, _)| (i, planted.redundant.layers[&i].kept_filters()))
        .collect()
}
