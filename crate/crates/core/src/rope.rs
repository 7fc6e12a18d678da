//! Three-axis rotary position encoding.
//!
//! Every token carries an (instance, row, col) identifier. The head
//! dimension is split into three channel groups, one per axis, and each
//! group is rotated by angles proportional to its axis component. Schemes
//! differ only in how identifiers are assigned to a mixed text/image
//! sequence:
//!
//! * `omni_rope`   — per-image instance id, spatial coordinates restart at
//!   (0,0) inside every image, so corresponding patches of different images
//!   share identical row/col rotations.
//! * `lumina_accum` — instance axis unused; row/col offsets accumulate
//!   across segments, giving every image a disjoint coordinate window.
//! * `qwen_accum`  — a single accumulated offset feeds all three axes, with
//!   spatial coordinates added on top of it.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Three-dimensional positional identifier of one token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PosId3 {
    pub instance: u32,
    pub row: u32,
    pub col: u32,
}

impl PosId3 {
    pub fn new(instance: u32, row: u32, col: u32) -> Self {
        PosId3 { instance, row, col }
    }

    pub fn component(&self, axis: usize) -> u32 {
        match axis {
            0 => self.instance,
            1 => self.row,
            _ => self.col,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageRole {
    Input,
    Output,
}

/// One run of tokens: a text span or an image patch grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Text { len: usize },
    Image { index: usize, height: usize, width: usize, role: ImageRole },
}

impl Segment {
    pub fn token_count(&self) -> usize {
        match *self {
            Segment::Text { len } => len,
            Segment::Image { height, width, .. } => height * width,
        }
    }

    pub fn is_output(&self) -> bool {
        matches!(self, Segment::Image { role: ImageRole::Output, .. })
    }
}

/// Positional encoding scheme under comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    OmniRope,
    LuminaAccum,
    QwenAccum,
}

pub const SCHEME_NAMES: [&str; 3] = ["omni_rope", "lumina_accum", "qwen_accum"];

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "omni_rope" => Ok(Scheme::OmniRope),
            "lumina_accum" => Ok(Scheme::LuminaAccum),
            "qwen_accum" => Ok(Scheme::QwenAccum),
            other => Err(Error::InvalidConfig(format!(
                "unknown scheme `{other}`; valid schemes: {}",
                SCHEME_NAMES.join(", ")
            ))),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Scheme::OmniRope => "omni_rope",
            Scheme::LuminaAccum => "lumina_accum",
            Scheme::QwenAccum => "qwen_accum",
        };
        f.write_str(s)
    }
}

fn default_axis_split() -> [f64; 3] {
    [0.25, 0.375, 0.375]
}

fn default_theta() -> f64 {
    10_000.0
}

/// Configuration of the positional encoding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeConfig {
    pub scheme: Scheme,
    #[serde(default)]
    pub use_image_index_embedding: bool,
    /// Fractions of the head dimension given to (instance, row, col).
    #[serde(default = "default_axis_split")]
    pub axis_split: [f64; 3],
    #[serde(default = "default_theta")]
    pub theta: f64,
}

impl SchemeConfig {
    pub fn new(scheme: Scheme) -> Self {
        SchemeConfig {
            scheme,
            use_image_index_embedding: false,
            axis_split: default_axis_split(),
            theta: default_theta(),
        }
    }

    pub fn with_index_embedding(mut self, on: bool) -> Self {
        self.use_image_index_embedding = on;
        self
    }

    /// Rotary pair counts per axis for a head dimension: largest-remainder
    /// split of `head_dim / 2` slots so counts are even channel counts that
    /// sum exactly to `head_dim`.
    pub fn axis_pairs(&self, head_dim: usize) -> Result<[usize; 3]> {
        if head_dim < 6 || head_dim % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "head dimension {head_dim} cannot host three even channel groups"
            )));
        }
        let total = head_dim / 2;
        let sum: f64 = self.axis_split.iter().sum();
        if sum <= 0.0 || self.axis_split.iter().any(|&f| f < 0.0) {
            return Err(Error::InvalidConfig(format!(
                "axis_split {:?} must be non-negative with positive sum",
                self.axis_split
            )));
        }
        let mut pairs = [0usize; 3];
        let mut rema: Vec<(usize, f64)> = Vec::with_capacity(3);
        let mut assigned = 0;
        for (a, &f) in self.axis_split.iter().enumerate() {
            let raw = f / sum * total as f64;
            pairs[a] = raw.floor() as usize;
            assigned += pairs[a];
            rema.push((a, raw - raw.floor()));
        }
        // Distribute leftovers by largest fractional part, axis order breaking ties.
        rema.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
        for (a, _) in rema.iter().cycle().take(total - assigned) {
            pairs[*a] += 1;
        }
        if pairs.iter().any(|&p| p == 0) {
            return Err(Error::InvalidConfig(format!(
                "head dimension {head_dim} leaves an axis with no rotary pairs (split {:?})",
                self.axis_split
            )));
        }
        Ok(pairs)
    }
}

fn validate_layout(layout: &[Segment]) -> Result<()> {
    if layout.is_empty() {
        return Err(Error::InvalidLayout("empty segment list".into()));
    }
    let mut outputs = 0;
    let mut indices = Vec::new();
    for seg in layout {
        match *seg {
            Segment::Text { len } => {
                if len == 0 {
                    return Err(Error::InvalidLayout("text segment of length 0".into()));
                }
            }
            Segment::Image { index, height, width, role } => {
                if height == 0 || width == 0 {
                    return Err(Error::InvalidLayout(format!(
                        "image {index} has empty grid {height}x{width}"
                    )));
                }
                if indices.contains(&index) {
                    return Err(Error::InvalidLayout(format!("duplicate image index {index}")));
                }
                indices.push(index);
                if role == ImageRole::Output {
                    outputs += 1;
                }
            }
        }
    }
    if outputs > 1 {
        return Err(Error::InvalidLayout(format!("{outputs} output segments, at most 1 allowed")));
    }
    Ok(())
}

/// Assign one [`PosId3`] per token of `layout` under `scheme`.
pub fn assign_positions(layout: &[Segment], scheme: Scheme) -> Result<Vec<PosId3>> {
    validate_layout(layout)?;
    let total: usize = layout.iter().map(Segment::token_count).sum();
    let mut ids = Vec::with_capacity(total);
    match scheme {
        Scheme::OmniRope => {
            // Running offset: +1 per text token, +1 per image segment. Image
            // tokens restart their spatial grid at (0,0).
            let mut offset = 0u32;
            for seg in layout {
                match *seg {
                    Segment::Text { len } => {
                        for _ in 0..len {
                            ids.push(PosId3::new(offset, offset, offset));
                            offset += 1;
                        }
                    }
                    Segment::Image { height, width, .. } => {
                        for r in 0..height as u32 {
                            for c in 0..width as u32 {
                                ids.push(PosId3::new(offset, r, c));
                            }
                        }
                        offset += 1;
                    }
                }
            }
        }
        Scheme::LuminaAccum => {
            // Instance axis unused; spatial offsets accumulate each segment's span.
            let (mut dh, mut dw) = (0u32, 0u32);
            for seg in layout {
                match *seg {
                    Segment::Text { len } => {
                        for t in 0..len as u32 {
                            ids.push(PosId3::new(0, dh + t, dw + t));
                        }
                        dh += len as u32;
                        dw += len as u32;
                    }
                    Segment::Image { height, width, .. } => {
                        for r in 0..height as u32 {
                            for c in 0..width as u32 {
                                ids.push(PosId3::new(0, dh + r, dw + c));
                            }
                        }
                        dh += height as u32;
                        dw += width as u32;
                    }
                }
            }
        }
        Scheme::QwenAccum => {
            // One accumulated offset feeds all axes; advances by the maximal
            // span of each segment.
            let mut di = 0u32;
            for seg in layout {
                match *seg {
                    Segment::Text { len } => {
                        for t in 0..len as u32 {
                            ids.push(PosId3::new(di + t, di + t, di + t));
                        }
                        di += len as u32;
                    }
                    Segment::Image { height, width, .. } => {
                        for r in 0..height as u32 {
                            for c in 0..width as u32 {
                                ids.push(PosId3::new(di, di + r, di + c));
                            }
                        }
                        di += height.max(width) as u32;
                    }
                }
            }
        }
    }
    Ok(ids)
}

/// Precomputed cos/sin per token and per rotary pair slot of one head.
///
/// Slot layout within a head: instance pairs, then row pairs, then col
/// pairs. The same table applies to every head of a wider vector.
#[derive(Debug)]
pub struct RotationTable {
    tokens: usize,
    head_dim: usize,
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl RotationTable {
    pub fn build(posids: &[PosId3], head_dim: usize, config: &SchemeConfig) -> Result<Self> {
        let pairs = config.axis_pairs(head_dim)?;
        let slots = head_dim / 2;
        let mut cos = Vec::with_capacity(posids.len() * slots);
        let mut sin = Vec::with_capacity(posids.len() * slots);
        for pid in posids {
            for axis in 0..3 {
                let p_a = pairs[axis];
                let d_axis = (2 * p_a) as f64;
                let comp = pid.component(axis) as f64;
                for j in 0..p_a {
                    let freq = config.theta.powf(-2.0 * j as f64 / d_axis);
                    let angle = comp * freq;
                    cos.push(angle.cos() as f32);
                    sin.push(angle.sin() as f32);
                }
            }
        }
        Ok(RotationTable { tokens: posids.len(), head_dim, cos, sin })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Cos/sin row of one token (length head_dim/2 each).
    pub fn token_angles(&self, token: usize) -> (&[f32], &[f32]) {
        let slots = self.head_dim / 2;
        (&self.cos[token * slots..(token + 1) * slots], &self.sin[token * slots..(token + 1) * slots])
    }

    /// Table restricted to `start..start+len` tokens.
    pub fn slice(&self, start: usize, len: usize) -> RotationTable {
        let slots = self.head_dim / 2;
        RotationTable {
            tokens: len,
            head_dim: self.head_dim,
            cos: self.cos[start * slots..(start + len) * slots].to_vec(),
            sin: self.sin[start * slots..(start + len) * slots].to_vec(),
        }
    }

    /// Rotate every head of each row in place. `inverse` applies the
    /// transposed (negative-angle) rotation.
    pub fn rotate(&self, data: &mut [f32], row_len: usize, inverse: bool) {
        let slots = self.head_dim / 2;
        let heads = row_len / self.head_dim;
        debug_assert_eq!(heads * self.head_dim, row_len);
        debug_assert_eq!(data.len(), self.tokens * row_len);
        for (t, row) in data.chunks_mut(row_len).enumerate() {
            let cs = &self.cos[t * slots..(t + 1) * slots];
            let sn = &self.sin[t * slots..(t + 1) * slots];
            for h in 0..heads {
                let head = &mut row[h * self.head_dim..(h + 1) * self.head_dim];
                for j in 0..slots {
                    let (c, s) = (cs[j], if inverse { -sn[j] } else { sn[j] });
                    let x0 = head[2 * j];
                    let x1 = head[2 * j + 1];
                    head[2 * j] = x0 * c - x1 * s;
                    head[2 * j + 1] = x0 * s + x1 * c;
                }
            }
        }
    }
}

/// Rotate query/key vectors ([n, heads*head_dim]) according to `posids`.
pub fn apply_rotary(
    vectors: &Tensor,
    posids: &[PosId3],
    config: &SchemeConfig,
    head_dim: usize,
) -> Result<Tensor> {
    if vectors.rows() != posids.len() || vectors.cols() % head_dim != 0 {
        return Err(Error::ShapeMismatch {
            node: "apply_rotary".into(),
            details: format!(
                "{:?} with {} position ids, head_dim {head_dim}",
                vectors.shape(),
                posids.len()
            ),
        });
    }
    let table = RotationTable::build(posids, head_dim, config)?;
    let mut out = vectors.clone();
    table.rotate(out.data_mut(), vectors.cols(), false);
    Ok(out)
}

/// Add `table[k]` to every token of image segment `k`; text tokens pass
/// through. No-op when the config flag is off.
pub fn image_index_embedding(
    tokens: &mut Tensor,
    layout: &[Segment],
    table: &Tensor,
    enabled: bool,
) -> Result<()> {
    if !enabled {
        return Ok(());
    }
    validate_layout(layout)?;
    let d = tokens.cols();
    if table.cols() != d {
        return Err(Error::ShapeMismatch {
            node: "image_index_embedding".into(),
            details: format!("tokens {:?} vs table {:?}", tokens.shape(), table.shape()),
        });
    }
    let mut start = 0;
    for seg in layout {
        let count = seg.token_count();
        if let Segment::Image { index, .. } = *seg {
            if index >= table.rows() {
                return Err(Error::IndexOutOfRange { index, table_len: table.rows() });
            }
            let row = table.data()[index * d..(index + 1) * d].to_vec();
            for r in start..start + count {
                for (v, e) in tokens.data_mut()[r * d..(r + 1) * d].iter_mut().zip(&row) {
                    *v += e;
                }
            }
        }
        start += count;
    }
    Ok(())
}

/// Shared rotation table handle used by the model graph.
pub fn build_table(posids: &[PosId3], head_dim: usize, config: &SchemeConfig) -> Result<Arc<RotationTable>> {
    Ok(Arc::new(RotationTable::build(posids, head_dim, config)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_layout() -> Vec<Segment> {
        vec![
            Segment::Text { len: 2 },
            Segment::Image { index: 1, height: 2, width: 2, role: ImageRole::Input },
            Segment::Image { index: 2, height: 2, width: 2, role: ImageRole::Input },
        ]
    }

    #[test]
    fn omni_positions_restart_spatial_grid() {
        let ids = assign_positions(&demo_layout(), Scheme::OmniRope).unwrap();
        let expect = [
            (0, 0, 0),
            (1, 1, 1),
            (2, 0, 0),
            (2, 0, 1),
            (2, 1, 0),
            (2, 1, 1),
            (3, 0, 0),
            (3, 0, 1),
            (3, 1, 0),
            (3, 1, 1),
        ];
        let got: Vec<(u32, u32, u32)> = ids.iter().map(|p| (p.instance, p.row, p.col)).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn lumina_positions_accumulate_offsets() {
        let ids = assign_positions(&demo_layout(), Scheme::LuminaAccum).unwrap();
        let expect = [
            (0, 0, 0),
            (0, 1, 1),
            (0, 2, 2),
            (0, 2, 3),
            (0, 3, 2),
            (0, 3, 3),
            (0, 4, 4),
            (0, 4, 5),
            (0, 5, 4),
            (0, 5, 5),
        ];
        let got: Vec<(u32, u32, u32)> = ids.iter().map(|p| (p.instance, p.row, p.col)).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn qwen_positions_share_one_offset() {
        let ids = assign_positions(&demo_layout(), Scheme::QwenAccum).unwrap();
        let expect = [
            (0, 0, 0),
            (1, 1, 1),
            (2, 2, 2),
            (2, 2, 3),
            (2, 3, 2),
            (2, 3, 3),
            (4, 4, 4),
            (4, 4, 5),
            (4, 5, 4),
            (4, 5, 5),
        ];
        let got: Vec<(u32, u32, u32)> = ids.iter().map(|p| (p.instance, p.row, p.col)).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn layout_validation_rejects_duplicates_and_extra_outputs() {
        let dup = vec![
            Segment::Image { index: 1, height: 2, width: 2, role: ImageRole::Input },
            Segment::Image { index: 1, height: 2, width: 2, role: ImageRole::Input },
        ];
        assert!(assign_positions(&dup, Scheme::OmniRope).is_err());
        let two_out = vec![
            Segment::Image { index: 1, height: 2, width: 2, role: ImageRole::Output },
            Segment::Image { index: 2, height: 2, width: 2, role: ImageRole::Output },
        ];
        assert!(assign_positions(&two_out, Scheme::OmniRope).is_err());
        assert!(assign_positions(&[], Scheme::OmniRope).is_err());
    }

    #[test]
    fn axis_pairs_cover_head_dim() {
        let cfg = SchemeConfig::new(Scheme::OmniRope);
        assert_eq!(cfg.axis_pairs(32).unwrap(), [4, 6, 6]);
        assert_eq!(cfg.axis_pairs(8).unwrap(), [1, 2, 1]);
        for hd in [6usize, 8, 12, 16, 24, 32, 64, 128] {
            let pairs = cfg.axis_pairs(hd).unwrap();
            assert_eq!(pairs.iter().sum::<usize>() * 2, hd);
            assert!(pairs.iter().all(|&p| p > 0));
        }
        assert!(cfg.axis_pairs(4).is_err());
        assert!(cfg.axis_pairs(7).is_err());
    }

    #[test]
    fn zero_position_is_identity() {
        let cfg = SchemeConfig::new(Scheme::OmniRope);
        let x = Tensor::new(vec![1, 16], (0..16).map(|i| i as f32 - 7.5).collect()).unwrap();
        let y = apply_rotary(&x, &[PosId3::new(0, 0, 0)], &cfg, 16).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn rotation_preserves_norm() {
        let cfg = SchemeConfig::new(Scheme::OmniRope);
        let mut rng = crate::rng::Rng::new(11);
        for _ in 0..50 {
            let x = Tensor::new(vec![1, 32], rng.normal_vec(32)).unwrap();
            let pid = PosId3::new(
                rng.uniform_usize(50) as u32,
                rng.uniform_usize(50) as u32,
                rng.uniform_usize(50) as u32,
            );
            let y = apply_rotary(&x, &[pid], &cfg, 32).unwrap();
            let nx: f32 = x.data().iter().map(|v| v * v).sum::<f32>().sqrt();
            let ny: f32 = y.data().iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((nx - ny).abs() < 1e-5 * nx.max(1.0), "{nx} vs {ny}");
        }
    }

    #[test]
    fn inverse_rotation_roundtrips() {
        let cfg = SchemeConfig::new(Scheme::QwenAccum);
        let mut rng = crate::rng::Rng::new(12);
        let pids = [PosId3::new(3, 10, 2), PosId3::new(0, 7, 7)];
        let table = RotationTable::build(&pids, 16, &cfg).unwrap();
        let orig: Vec<f32> = rng.normal_vec(2 * 32);
        let mut data = orig.clone();
        table.rotate(&mut data, 32, false);
        table.rotate(&mut data, 32, true);
        for (a, b) in data.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn index_embedding_flag_and_table() {
        let layout = vec![
            Segment::Text { len: 1 },
            Segment::Image { index: 1, height: 1, width: 2, role: ImageRole::Input },
        ];
        let base = Tensor::new(vec![3, 2], vec![1.0; 6]).unwrap();
        let table = Tensor::new(vec![2, 2], vec![0.5, 0.25, -1.0, 2.0]).unwrap();

        let mut off = base.clone();
        image_index_embedding(&mut off, &layout, &table, false).unwrap();
        assert_eq!(off.data(), base.data());

        let mut on = base.clone();
        image_index_embedding(&mut on, &layout, &table, true).unwrap();
        assert_eq!(on.data(), &[1.0, 1.0, 0.0, 3.0, 0.0, 3.0]);

        let narrow = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let mut bad = base.clone();
        let err = image_index_embedding(&mut bad, &layout, &narrow, true).unwrap_err();
        assert!(matches!(err, Error::IndexOutOfRange { index: 1, table_len: 1 }));
    }
}
