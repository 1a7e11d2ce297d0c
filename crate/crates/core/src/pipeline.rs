//! End-to-end edge detection: transform, train, decode, fuse, score.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hmc::{self, ChainParams, FrozenState, TrainOutcome};
use crate::hmt::{self, CoeffQuadtree, TreeParams};
use crate::image_io::{Bitmap, GrayImage};
use crate::params::{ModelKind, ModelParams};
use crate::stat_models::{posterior_state_ln, Emission, MixtureParams, VARIANCE_FLOOR};
use crate::swt::{swt_forward_plane, Orientation, Plane, SwtPyramid, Wavelet};

/// Starting state distribution for EM.
pub const INITIAL_PRIOR: [f64; 2] = [0.9, 0.1];
/// Starting transition matrix for EM (chain steps and tree parent-child links).
pub const INITIAL_TRANSITION: [[f64; 2]; 2] = [[0.9, 0.1], [0.3, 0.7]];

macro_rules! keyword_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($name), " '{}'"), other
                    ))),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self {
                    $($name::$variant => $text,)+
                })
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FusionRule {
    #[default]
    Or,
    And,
    /// More than half of the planes vote edge.
    Majority,
}

keyword_enum!(FusionRule { Or => "or", And => "and", Majority => "majority" });

/// Direction of the chains laid over each subband.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScanOrder {
    /// One chain per image row, left to right.
    #[default]
    Rows,
    /// One chain per image column, top to bottom.
    Columns,
}

keyword_enum!(ScanOrder { Rows => "rows", Columns => "columns" });

/// How the transform treats the image border.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Boundary {
    /// The image is mirrored (half-sample symmetric) by `2^J` pixels on each
    /// side before the transform and the subbands are cropped back, so the
    /// opposite borders do not produce a wrap-around edge.
    #[default]
    Symmetric,
    /// Plain periodic transform; exactly equivariant under circular shifts.
    Periodic,
}

keyword_enum!(Boundary { Symmetric => "symmetric", Periodic => "periodic" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecodeRule {
    /// Joint MAP states: Viterbi on chains, max-product on trees.
    #[default]
    Map,
    /// Each coefficient labeled on its own by the two-state mixture
    /// posterior, with the model's marginal edge probability for that scale
    /// as prior.
    Pixelwise,
}

keyword_enum!(DecodeRule { Map => "map", Pixelwise => "pixelwise" });

#[derive(Debug, Clone, PartialEq)]
pub struct DetectConfig {
    pub scales: usize,
    pub model: ModelKind,
    pub wavelet: Wavelet,
    pub fusion: FusionRule,
    pub max_iters: usize,
    pub tol: f64,
    /// Model and fuse the diagonal (HH) subband too.
    pub include_diagonal: bool,
    pub scan: ScanOrder,
    pub boundary: Boundary,
    pub decode: DecodeRule,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            scales: 3,
            model: ModelKind::Hmc,
            wavelet: Wavelet::Haar,
            fusion: FusionRule::Or,
            max_iters: 50,
            tol: 1e-6,
            include_diagonal: false,
            scan: ScanOrder::Rows,
            boundary: Boundary::Symmetric,
            decode: DecodeRule::Map,
        }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales == 0 {
            return Err(Error::Config("scales must be at least 1".into()));
        }
        if self.scales > 16 {
            return Err(Error::Config(format!(
                "scales = {} is too many",
                self.scales
            )));
        }
        if self.tol.is_nan() || self.tol <= 0.0 {
            return Err(Error::Config(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        Ok(())
    }

    pub fn orientations(&self) -> Vec<Orientation> {
        if self.include_diagonal {
            Orientation::ALL.to_vec()
        } else {
            vec![Orientation::LH, Orientation::HL]
        }
    }
}

/// Hidden-state labels of one subband, same size as the image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatePlane {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl StatePlane {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height || labels.iter().any(|&l| l > 1) {
            return Err(Error::Dimension(format!(
                "{} labels (each 0 or 1) expected for a {width}x{height} plane",
                width * height
            )));
        }
        Ok(StatePlane {
            width,
            height,
            labels,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        StatePlane {
            width,
            height,
            labels: vec![0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn circular_shift(&self, dx: usize, dy: usize) -> StatePlane {
        let (w, h) = (self.width, self.height);
        let mut labels = vec![0; w * h];
        for y in 0..h {
            for x in 0..w {
                labels[((y + dy) % h) * w + (x + dx) % w] = self.labels[y * w + x];
            }
        }
        StatePlane {
            width: w,
            height: h,
            labels,
        }
    }
}

/// Binary edge raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeMap {
    width: usize,
    height: usize,
    edges: Vec<bool>,
}

impl EdgeMap {
    pub fn new(width: usize, height: usize, edges: Vec<bool>) -> Result<Self> {
        if edges.len() != width * height {
            return Err(Error::Dimension(format!(
                "{} pixels for a {width}x{height} edge map",
                edges.len()
            )));
        }
        Ok(EdgeMap {
            width,
            height,
            edges,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        EdgeMap {
            width,
            height,
            edges: vec![false; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn edges(&self) -> &[bool] {
        &self.edges
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.edges[y * self.width + x]
    }

    pub fn edge_count(&self) -> usize {
        edge_count(self)
    }

    pub fn circular_shift(&self, dx: usize, dy: usize) -> EdgeMap {
        let (w, h) = (self.width, self.height);
        let mut edges = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                edges[((y + dy) % h) * w + (x + dx) % w] = self.edges[y * w + x];
            }
        }
        EdgeMap {
            width: w,
            height: h,
            edges,
        }
    }

    /// Ground truth for [`crate::image_io::make_step_image`]: column
    /// `edge_column` (the first high column) in every row.
    pub fn step_truth(width: usize, height: usize, edge_column: usize) -> EdgeMap {
        let edges = (0..width * height)
            .map(|i| i % width == edge_column)
            .collect();
        EdgeMap {
            width,
            height,
            edges,
        }
    }

    pub fn to_bitmap(&self) -> Bitmap {
        Bitmap {
            width: self.width,
            height: self.height,
            bits: self.edges.clone(),
        }
    }

    pub fn from_bitmap(b: Bitmap) -> Result<Self> {
        EdgeMap::new(b.width, b.height, b.bits)
    }
}

pub fn edge_count(map: &EdgeMap) -> usize {
    map.edges.iter().filter(|&&e| e).count()
}

/// Pixelwise combination of same-size state planes.
pub fn fuse_states(planes: &[&StatePlane], rule: FusionRule) -> Result<EdgeMap> {
    let first = planes
        .first()
        .ok_or_else(|| Error::Dimension("no state planes to fuse".into()))?;
    let (w, h) = (first.width, first.height);
    if let Some(p) = planes.iter().find(|p| (p.width, p.height) != (w, h)) {
        return Err(Error::Dimension(format!(
            "cannot fuse a {}x{} plane with a {w}x{h} plane",
            p.width, p.height
        )));
    }
    let n = planes.len();
    let edges = (0..w * h)
        .map(|i| {
            let votes = planes.iter().filter(|p| p.labels[i] == 1).count();
            match rule {
                FusionRule::Or => votes > 0,
                FusionRule::And => votes == n,
                FusionRule::Majority => 2 * votes > n,
            }
        })
        .collect();
    Ok(EdgeMap {
        width: w,
        height: h,
        edges,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EdgeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
}

/// Precision, recall and F1 of `map` against `truth`.
///
/// Detected pixels are visited in row-major order; each claims the nearest
/// still-unmatched truth pixel within Chebyshev distance `tolerance_px`
/// (first in row-major order among equally near ones). Precision is 1 for an
/// empty detection and recall is 1 for an empty truth.
pub fn edge_f1(map: &EdgeMap, truth: &EdgeMap, tolerance_px: usize) -> Result<EdgeScore> {
    if (map.width, map.height) != (truth.width, truth.height) {
        return Err(Error::Dimension(format!(
            "edge map is {}x{}, truth is {}x{}",
            map.width, map.height, truth.width, truth.height
        )));
    }
    let (w, h) = (map.width, map.height);
    let mut claimed = vec![false; w * h];
    let mut tp = 0;
    let t = tolerance_px;
    for y in 0..h {
        for x in 0..w {
            if !map.edges[y * w + x] {
                continue;
            }
            let mut best: Option<(usize, usize)> = None;
            for ty in y.saturating_sub(t)..=(y + t).min(h - 1) {
                for tx in x.saturating_sub(t)..=(x + t).min(w - 1) {
                    let i = ty * w + tx;
                    if truth.edges[i] && !claimed[i] {
                        let d = ty.abs_diff(y).max(tx.abs_diff(x));
                        if best.is_none_or(|(bd, _)| d < bd) {
                            best = Some((d, i));
                        }
                    }
                }
            }
            if let Some((_, i)) = best {
                claimed[i] = true;
                tp += 1;
            }
        }
    }
    let detected = edge_count(map);
    let actual = edge_count(truth);
    let precision = if detected == 0 {
        1.0
    } else {
        tp as f64 / detected as f64
    };
    let recall = if actual == 0 {
        1.0
    } else {
        tp as f64 / actual as f64
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(EdgeScore {
        precision,
        recall,
        f1,
        true_positives: tp,
    })
}

/// Data-driven EM starting point: `sigma0` is the RMS of the smallest 75% of
/// coefficients by magnitude, `b1` the mean magnitude of the largest 25%.
pub fn initial_emission(coeffs: &[f64]) -> Emission {
    let mut mags: Vec<f64> = coeffs.iter().map(|w| w.abs()).collect();
    mags.sort_by(f64::total_cmp);
    let n = mags.len();
    let split = ((3 * n) / 4).clamp(1.min(n), n.saturating_sub(1).max(1));
    let (small, big) = mags.split_at(split.min(n));
    let rms = if small.is_empty() {
        0.0
    } else {
        (small.iter().map(|m| m * m).sum::<f64>() / small.len() as f64).sqrt()
    };
    let mean_big = if big.is_empty() {
        small.last().copied().unwrap_or(0.0)
    } else {
        big.iter().sum::<f64>() / big.len() as f64
    };
    Emission {
        sigma0: rms.max(VARIANCE_FLOOR),
        b1: mean_big.max(VARIANCE_FLOOR),
    }
}

/// Whether the edge state of `e` describes larger coefficients than the
/// non-edge state. When it does not (for example EM fit the edge state to a
/// spike of exact zeros in a subband that holds only noise) the state cannot
/// stand for edges, and the subband is decoded as edge-free.
pub fn has_edge_population(e: &Emission) -> bool {
    e.edge_std() > e.sigma0
}

/// One trained model: a chain for one subband, or a tree for one orientation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingSummary {
    pub orientation: Orientation,
    /// 1-based scale for chains, `None` for trees.
    pub scale: Option<usize>,
    /// No coefficient reached the variance floor; nothing was trained.
    pub flat: bool,
    pub iterations: usize,
    pub converged: bool,
    pub final_log_likelihood: Option<f64>,
    /// States were swapped after EM because the edge state was the majority.
    pub relabeled: bool,
    /// Scales (1-based) decoded as edge-free; see [`has_edge_population`].
    pub silent_scales: Vec<usize>,
    pub frozen: Vec<FrozenState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubbandStates {
    pub orientation: Orientation,
    /// 1-based.
    pub scale: usize,
    pub states: StatePlane,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub edge_map: EdgeMap,
    /// Decoded states of every modeled subband at every scale.
    pub states: Vec<SubbandStates>,
    pub params: ModelParams,
    /// Empty when the parameters were supplied rather than trained.
    pub training: Vec<TrainingSummary>,
}

/// Forward transform honoring the configured boundary rule.
pub fn analyze(img: &GrayImage, config: &DetectConfig) -> Result<SwtPyramid> {
    config.validate()?;
    let plane = Plane::from(img);
    let need = 1usize << config.scales;
    if img.width() < need || img.height() < need {
        return Err(Error::Dimension(format!(
            "{}x{} image is smaller than 2^{} = {need} pixels per side",
            img.width(),
            img.height(),
            config.scales
        )));
    }
    match config.boundary {
        Boundary::Periodic => swt_forward_plane(&plane, config.scales, config.wavelet),
        Boundary::Symmetric => {
            let margin = need;
            let padded = plane.pad_symmetric(margin);
            let pyr = swt_forward_plane(&padded, config.scales, config.wavelet)?;
            Ok(pyr.crop(margin, margin, img.width(), img.height()))
        }
    }
}

fn is_flat(planes: &[&Plane]) -> bool {
    planes.iter().all(|p| p.max_abs() < VARIANCE_FLOOR)
}

fn sequences(plane: &Plane, scan: ScanOrder) -> Vec<Vec<f64>> {
    match scan {
        ScanOrder::Rows => (0..plane.height()).map(|y| plane.row(y).to_vec()).collect(),
        ScanOrder::Columns => (0..plane.width()).map(|x| plane.column(x)).collect(),
    }
}

fn write_sequence_labels(
    labels: &mut [u8],
    width: usize,
    scan: ScanOrder,
    index: usize,
    states: &[u8],
) {
    match scan {
        ScanOrder::Rows => labels[index * width..(index + 1) * width].copy_from_slice(states),
        ScanOrder::Columns => {
            for (y, &s) in states.iter().enumerate() {
                labels[y * width + index] = s;
            }
        }
    }
}

fn train_chain(
    plane: &Plane,
    config: &DetectConfig,
) -> Result<(Option<ChainParams>, TrainingSummary)> {
    let mut summary = TrainingSummary {
        orientation: Orientation::LH,
        scale: None,
        flat: true,
        iterations: 0,
        converged: true,
        final_log_likelihood: None,
        relabeled: false,
        silent_scales: Vec::new(),
        frozen: Vec::new(),
    };
    if is_flat(&[plane]) {
        return Ok((None, summary));
    }
    let init = ChainParams::new(
        INITIAL_PRIOR,
        INITIAL_TRANSITION,
        initial_emission(plane.data()),
    )?;
    let seqs = sequences(plane, config.scan);
    let TrainOutcome {
        mut params,
        history,
        iterations,
        converged,
        frozen,
    } = hmc::em_train(&seqs, &init, config.max_iters, config.tol)?;
    if params.stationary_edge() > 0.5 {
        params = params.swap_states();
        summary.relabeled = true;
    }
    summary.flat = false;
    if !has_edge_population(&params.emission) {
        summary.silent_scales.push(1);
    }
    summary.iterations = iterations;
    summary.converged = converged;
    summary.final_log_likelihood = history.last().copied();
    summary.frozen = frozen;
    Ok((Some(params), summary))
}

fn forest(pyr: &SwtPyramid, orientation: Orientation) -> Result<CoeffQuadtree> {
    let planes: Vec<&Plane> = (1..=pyr.scales())
        .map(|j| pyr.detail(j, orientation))
        .collect();
    CoeffQuadtree::from_planes(&planes)
}

fn train_tree(
    pyr: &SwtPyramid,
    orientation: Orientation,
    config: &DetectConfig,
) -> Result<(Option<TreeParams>, TrainingSummary)> {
    let planes: Vec<&Plane> = (1..=pyr.scales())
        .map(|j| pyr.detail(j, orientation))
        .collect();
    let mut summary = TrainingSummary {
        orientation,
        scale: None,
        flat: true,
        iterations: 0,
        converged: true,
        final_log_likelihood: None,
        relabeled: false,
        silent_scales: Vec::new(),
        frozen: Vec::new(),
    };
    if is_flat(&planes) {
        return Ok((None, summary));
    }
    let tree = forest(pyr, orientation)?;
    let emissions = tree
        .levels()
        .iter()
        .map(|g| initial_emission(&g.values))
        .collect();
    let init = TreeParams::new(
        INITIAL_PRIOR,
        vec![INITIAL_TRANSITION; pyr.scales() - 1],
        emissions,
    )?;
    let outcome = hmt::em_train_tree(
        std::slice::from_ref(&tree),
        &init,
        config.max_iters,
        config.tol,
    )?;
    let mut params = outcome.params;
    if params.level_marginals()[0][1] > 0.5 {
        params = params.swap_states();
        summary.relabeled = true;
    }
    summary.flat = false;
    summary.silent_scales = (1..=params.emissions.len())
        .filter(|&j| !has_edge_population(&params.emissions[j - 1]))
        .collect();
    summary.iterations = outcome.iterations;
    summary.converged = outcome.converged;
    summary.final_log_likelihood = outcome.history.last().copied();
    summary.frozen = outcome.frozen;
    Ok((Some(params), summary))
}

/// Trains the configured model on every modeled subband of `pyr`.
pub fn train_model(
    pyr: &SwtPyramid,
    config: &DetectConfig,
) -> Result<(ModelParams, Vec<TrainingSummary>)> {
    config.validate()?;
    let orientations = config.orientations();
    match config.model {
        ModelKind::Hmc => {
            let units: Vec<(Orientation, usize)> = orientations
                .iter()
                .flat_map(|&o| (1..=pyr.scales()).map(move |j| (o, j)))
                .collect();
            let trained: Vec<Result<(Option<ChainParams>, TrainingSummary)>> = units
                .par_iter()
                .map(|&(o, j)| {
                    train_chain(pyr.detail(j, o), config).map(|(p, mut s)| {
                        s.orientation = o;
                        s.scale = Some(j);
                        if !s.silent_scales.is_empty() {
                            s.silent_scales = vec![j];
                        }
                        (p, s)
                    })
                })
                .collect();
            let mut subbands = BTreeMap::new();
            let mut summaries = Vec::with_capacity(units.len());
            for (unit, t) in units.into_iter().zip(trained) {
                let (p, s) = t?;
                subbands.insert(unit, p);
                summaries.push(s);
            }
            Ok((
                ModelParams::Chain {
                    scales: pyr.scales(),
                    wavelet: pyr.wavelet,
                    subbands,
                },
                summaries,
            ))
        }
        ModelKind::Hmt => {
            let trained: Vec<Result<(Option<TreeParams>, TrainingSummary)>> = orientations
                .par_iter()
                .map(|&o| train_tree(pyr, o, config))
                .collect();
            let mut map = BTreeMap::new();
            let mut summaries = Vec::with_capacity(orientations.len());
            for (&o, t) in orientations.iter().zip(trained) {
                let (p, s) = t?;
                map.insert(o, p);
                summaries.push(s);
            }
            Ok((
                ModelParams::Tree {
                    scales: pyr.scales(),
                    wavelet: pyr.wavelet,
                    orientations: map,
                },
                summaries,
            ))
        }
    }
}

fn pixelwise_labels(plane: &Plane, emission: Emission, prior_edge: f64) -> Result<Vec<u8>> {
    let mix = MixtureParams::new(prior_edge.clamp(0.0, 1.0), emission.sigma0, emission.b1)?;
    Ok(plane
        .data()
        .iter()
        .map(|&w| u8::from(posterior_state_ln(w, &mix) > 0.5))
        .collect())
}

fn decode_chain(plane: &Plane, params: &ChainParams, config: &DetectConfig) -> Result<StatePlane> {
    let (w, h) = (plane.width(), plane.height());
    if !has_edge_population(&params.emission) {
        return Ok(StatePlane::zeros(w, h));
    }
    let labels = match config.decode {
        DecodeRule::Pixelwise => {
            pixelwise_labels(plane, params.emission, params.stationary_edge())?
        }
        DecodeRule::Map => {
            let seqs = sequences(plane, config.scan);
            let paths: Vec<Result<hmc::StateSequence>> = seqs
                .par_iter()
                .map(|s| hmc::viterbi(s, params).map(|r| r.0))
                .collect();
            let mut labels = vec![0u8; w * h];
            for (i, p) in paths.into_iter().enumerate() {
                write_sequence_labels(&mut labels, w, config.scan, i, p?.states());
            }
            labels
        }
    };
    StatePlane::new(w, h, labels)
}

/// Expands level-`k` tree labels back to full resolution: each node labels
/// its `2^k x 2^k` block.
fn tree_level_plane(
    tree: &CoeffQuadtree,
    level: usize,
    labels: &[u8],
    w: usize,
    h: usize,
) -> StatePlane {
    let cols = tree.levels()[level].cols;
    let mut out = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = labels[(y >> level) * cols + (x >> level)];
        }
    }
    StatePlane {
        width: w,
        height: h,
        labels: out,
    }
}

fn decode_tree(
    pyr: &SwtPyramid,
    orientation: Orientation,
    params: &TreeParams,
    config: &DetectConfig,
) -> Result<Vec<StatePlane>> {
    let (w, h) = (pyr.width(), pyr.height());
    let planes: Vec<StatePlane> = match config.decode {
        DecodeRule::Pixelwise => {
            let marginals = params.level_marginals();
            (1..=pyr.scales())
                .map(|j| {
                    let labels = pixelwise_labels(
                        pyr.detail(j, orientation),
                        params.emissions[j - 1],
                        marginals[j - 1][1],
                    )?;
                    StatePlane::new(w, h, labels)
                })
                .collect::<Result<_>>()?
        }
        DecodeRule::Map => {
            let tree = forest(pyr, orientation)?;
            let map = hmt::map_states_tree(&tree, params)?;
            (0..pyr.scales())
                .map(|k| tree_level_plane(&tree, k, &map.labels[k], w, h))
                .collect()
        }
    };
    Ok(planes
        .into_iter()
        .zip(&params.emissions)
        .map(|(p, e)| {
            if has_edge_population(e) {
                p
            } else {
                StatePlane::zeros(w, h)
            }
        })
        .collect())
}

/// Decodes every modeled subband with fixed parameters and fuses the
/// finest-scale states.
pub fn decode(
    pyr: &SwtPyramid,
    params: &ModelParams,
    config: &DetectConfig,
) -> Result<(EdgeMap, Vec<SubbandStates>)> {
    config.validate()?;
    if params.scales() != pyr.scales() {
        return Err(Error::Config(format!(
            "parameters are for {} scales, transform has {}",
            params.scales(),
            pyr.scales()
        )));
    }
    if params.kind() != config.model {
        return Err(Error::Config(format!(
            "parameters are for model {}, configuration asks for {}",
            params.kind(),
            config.model
        )));
    }
    let (w, h) = (pyr.width(), pyr.height());
    let orientations = config.orientations();
    let mut states = Vec::new();
    match params {
        ModelParams::Chain { subbands, .. } => {
            let units: Vec<(Orientation, usize)> = orientations
                .iter()
                .flat_map(|&o| (1..=pyr.scales()).map(move |j| (o, j)))
                .collect();
            let decoded: Vec<Result<StatePlane>> = units
                .par_iter()
                .map(|&(o, j)| match subbands.get(&(o, j)) {
                    Some(Some(p)) => decode_chain(pyr.detail(j, o), p, config),
                    Some(None) => Ok(StatePlane::zeros(w, h)),
                    None => Err(Error::Config(format!(
                        "no parameters for subband {o} scale {j}"
                    ))),
                })
                .collect();
            for ((o, j), d) in units.into_iter().zip(decoded) {
                states.push(SubbandStates {
                    orientation: o,
                    scale: j,
                    states: d?,
                });
            }
        }
        ModelParams::Tree {
            orientations: trees,
            ..
        } => {
            let decoded: Vec<Result<Vec<StatePlane>>> = orientations
                .par_iter()
                .map(|&o| match trees.get(&o) {
                    Some(Some(p)) => decode_tree(pyr, o, p, config),
                    Some(None) => Ok(vec![StatePlane::zeros(w, h); pyr.scales()]),
                    None => Err(Error::Config(format!("no parameters for orientation {o}"))),
                })
                .collect();
            for (&o, d) in orientations.iter().zip(decoded) {
                for (k, plane) in d?.into_iter().enumerate() {
                    states.push(SubbandStates {
                        orientation: o,
                        scale: k + 1,
                        states: plane,
                    });
                }
            }
        }
    }
    let finest: Vec<&StatePlane> = states
        .iter()
        .filter(|s| s.scale == 1)
        .map(|s| &s.states)
        .collect();
    let edge_map = fuse_states(&finest, config.fusion)?;
    Ok((edge_map, states))
}

/// Full detection: transform, EM training per subband, MAP decoding, fusion.
pub fn detect_edges(img: &GrayImage, config: &DetectConfig) -> Result<Detection> {
    let pyr = analyze(img, config)?;
    let (params, training) = train_model(&pyr, config)?;
    let (edge_map, states) = decode(&pyr, &params, config)?;
    Ok(Detection {
        edge_map,
        states,
        params,
        training,
    })
}

/// Detection with previously trained parameters (no EM).
pub fn detect_edges_with_params(
    img: &GrayImage,
    config: &DetectConfig,
    params: &ModelParams,
) -> Result<Detection> {
    let pyr = analyze(img, config)?;
    let (edge_map, states) = decode(&pyr, params, config)?;
    Ok(Detection {
        edge_map,
        states,
        params: params.clone(),
        training: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_io::make_step_image;

    fn plane(labels: &[u8], w: usize) -> StatePlane {
        StatePlane::new(w, labels.len() / w, labels.to_vec()).unwrap()
    }

    #[test]
    fn fusion_rules() {
        let zeros = plane(&[0; 4], 2);
        let ones = plane(&[1; 4], 2);
        assert_eq!(
            fuse_states(&[&zeros, &zeros], FusionRule::Or)
                .unwrap()
                .edge_count(),
            0
        );
        assert_eq!(
            fuse_states(&[&zeros, &ones], FusionRule::Or)
                .unwrap()
                .edge_count(),
            4
        );
        assert_eq!(
            fuse_states(&[&zeros, &ones], FusionRule::And)
                .unwrap()
                .edge_count(),
            0
        );
        let a = plane(&[1, 1, 0, 0], 2);
        let b = plane(&[1, 0, 1, 0], 2);
        let c = plane(&[0, 1, 1, 0], 2);
        let m = fuse_states(&[&a, &b, &c], FusionRule::Majority).unwrap();
        assert_eq!(m.edges(), &[true, true, true, false]);
        let odd = StatePlane::zeros(3, 2);
        assert!(fuse_states(&[&a, &odd], FusionRule::Or).is_err());
        assert!(fuse_states(&[], FusionRule::Or).is_err());
    }

    #[test]
    fn or_is_superset_of_and() {
        let a = plane(&[1, 1, 0, 0, 1, 0], 3);
        let b = plane(&[1, 0, 1, 0, 1, 1], 3);
        let or = fuse_states(&[&a, &b], FusionRule::Or).unwrap();
        let and = fuse_states(&[&a, &b], FusionRule::And).unwrap();
        assert!(or.edges().iter().zip(and.edges()).all(|(o, a)| *o || !*a));
    }

    #[test]
    fn edge_counts() {
        assert_eq!(EdgeMap::empty(5, 5).edge_count(), 0);
        assert_eq!(
            EdgeMap::new(10, 10, vec![true; 100]).unwrap().edge_count(),
            100
        );
    }

    #[test]
    fn f1_cases() {
        let truth = EdgeMap::step_truth(8, 8, 4);
        let s = edge_f1(&truth, &truth, 0).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        let s = edge_f1(&EdgeMap::empty(8, 8), &truth, 1).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 0.0, 0.0));
        let shifted = EdgeMap::step_truth(8, 8, 5);
        assert_eq!(edge_f1(&shifted, &truth, 1).unwrap().f1, 1.0);
        assert_eq!(edge_f1(&shifted, &truth, 0).unwrap().f1, 0.0);
        assert!(edge_f1(&EdgeMap::empty(4, 8), &truth, 1).is_err());
    }

    #[test]
    fn f1_matches_each_truth_pixel_once() {
        // Two detected columns flank one truth column; only one can match.
        let truth = EdgeMap::step_truth(8, 4, 4);
        let edges = (0..32).map(|i| i % 8 == 3 || i % 8 == 5).collect();
        let map = EdgeMap::new(8, 4, edges).unwrap();
        let s = edge_f1(&map, &truth, 1).unwrap();
        assert_eq!(s.true_positives, 4);
        assert!((s.precision - 0.5).abs() < 1e-15);
        assert_eq!(s.recall, 1.0);
    }

    #[test]
    fn initial_emission_split() {
        let coeffs = [0.0, -1.0, 1.0, 1.0, 2.0, -2.0, 3.0, -10.0];
        let e = initial_emission(&coeffs);
        // Smallest six magnitudes: 0 1 1 1 2 2 -> RMS sqrt(11/6); largest two: 3 10.
        assert!((e.sigma0 - (11.0f64 / 6.0).sqrt()).abs() < 1e-12);
        assert!((e.b1 - 6.5).abs() < 1e-12);
        let flat = initial_emission(&[0.0; 10]);
        assert_eq!((flat.sigma0, flat.b1), (VARIANCE_FLOOR, VARIANCE_FLOOR));
    }

    #[test]
    fn constant_image_has_no_edges() {
        let img = GrayImage::filled(32, 32, 0.4).unwrap();
        for model in [ModelKind::Hmc, ModelKind::Hmt] {
            for boundary in [Boundary::Symmetric, Boundary::Periodic] {
                let config = DetectConfig {
                    model,
                    boundary,
                    include_diagonal: true,
                    ..Default::default()
                };
                let d = detect_edges(&img, &config).unwrap();
                assert_eq!(d.edge_map.edge_count(), 0);
                assert!(d.training.iter().all(|t| t.flat));
            }
        }
    }

    #[test]
    fn step_edge_lands_on_its_column() {
        let img = make_step_image(32, 32, 16, 0.0, 1.0).unwrap();
        for model in [ModelKind::Hmc, ModelKind::Hmt] {
            let config = DetectConfig {
                scales: 2,
                model,
                ..Default::default()
            };
            let d = detect_edges(&img, &config).unwrap();
            let truth = EdgeMap::step_truth(32, 32, 16);
            assert_eq!(d.edge_map, truth, "{model}");
            assert_eq!(d.states.len(), 4);
        }
    }

    #[test]
    fn config_validation() {
        let img = GrayImage::filled(8, 8, 0.0).unwrap();
        let bad = DetectConfig {
            scales: 0,
            ..Default::default()
        };
        assert!(matches!(detect_edges(&img, &bad), Err(Error::Config(_))));
        let bad = DetectConfig {
            tol: 0.0,
            ..Default::default()
        };
        assert!(detect_edges(&img, &bad).is_err());
        let too_deep = DetectConfig {
            scales: 4,
            ..Default::default()
        };
        assert!(matches!(
            detect_edges(&img, &too_deep),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn edge_population_requires_heavier_edge_state() {
        assert!(has_edge_population(&Emission {
            sigma0: 0.01,
            b1: 0.1
        }));
        assert!(!has_edge_population(&Emission {
            sigma0: 0.01,
            b1: 1e-6
        }));
        // Equal standard deviations carry no edge population.
        let b1 = 0.01 / std::f64::consts::SQRT_2;
        assert!(!has_edge_population(&Emission {
            sigma0: 0.01 * 1.0,
            b1: b1 * (1.0 - 1e-12)
        }));
    }

    #[test]
    fn keywords_parse() {
        assert_eq!(
            "majority".parse::<FusionRule>().unwrap(),
            FusionRule::Majority
        );
        assert_eq!("columns".parse::<ScanOrder>().unwrap(), ScanOrder::Columns);
        assert_eq!(Boundary::Periodic.to_string(), "periodic");
        assert!("xor".parse::<FusionRule>().is_err());
    }
}
