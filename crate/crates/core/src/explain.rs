//! Grad-CAM heatmaps over convolution stages.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::{SeqNetModel, NUM_CLASSES};
use crate::tensor::Tensor;

/// Layer explained when none is given.
pub const DEFAULT_LAYER: &str = "res5";

/// Grad-CAM map of one sample at one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    /// `ReLU(Σ_k α_k A_k)` per feature position.
    pub values: Vec<f64>,
    pub layer: String,
    pub class: usize,
    /// Digest of the explained binary, when known.
    pub digest: Option<String>,
    /// File bytes per feature position.
    pub offset_scale: f64,
}

impl Heatmap {
    /// File offset at the centre of feature position `i`.
    pub fn file_offset(&self, i: usize) -> u64 {
        ((i as f64 + 0.5) * self.offset_scale).floor() as u64
    }

    /// Feature position covering file offset `offset`.
    pub fn feature_position(&self, offset: u64) -> usize {
        let p = (offset as f64 / self.offset_scale).floor() as usize;
        p.min(self.values.len().saturating_sub(1))
    }

    pub fn argmax(&self) -> usize {
        self.values
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    }

    /// CSV with header `position,file_offset,value`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["position", "file_offset", "value"])?;
        for (i, v) in self.values.iter().enumerate() {
            out.write_record([i.to_string(), self.file_offset(i).to_string(), v.to_string()])?;
        }
        out.flush().map_err(|e| Error::io("csv", e))?;
        Ok(())
    }
}

/// Grad-CAM for every row of `x` (`[batch, 1, input_length]`) at `layer`,
/// scored on the pre-softmax logit of `class`. `original_lengths` gives the
/// file length behind each row and sets the offset scale.
pub fn grad_cam(
    model: &SeqNetModel,
    x: &Tensor,
    class: usize,
    layer: &str,
    original_lengths: &[usize],
) -> Result<Vec<Heatmap>> {
    if class >= NUM_CLASSES {
        return Err(Error::InvalidConfig(format!("class {class} out of range")));
    }
    let n = model.spec().layer_length(layer)?;
    let batch = x.shape().first().copied().unwrap_or(0);
    if original_lengths.len() != batch {
        return Err(Error::ShapeMismatch {
            op: "grad_cam",
            lhs: vec![batch],
            rhs: vec![original_lengths.len()],
        });
    }
    let mut g = Graph::new();
    // the input leaf makes every activation part of the gradient path
    let xv = g.leaf(x.clone(), true);
    let f = model.forward_graph(&mut g, xv, Mode::Eval, false)?;
    let act = f.activation(layer)?;
    let score = g.select_column(f.logits, class)?;
    let total = g.sum(score);
    g.backward(total)?;
    let a = g.value(act);
    let grad = g.grad_or_zeros(act);
    let (b, c, len) = a.dims3("grad_cam")?;
    debug_assert_eq!(len, n);
    let mut maps = Vec::with_capacity(b);
    for (r, &orig) in original_lengths.iter().enumerate() {
        let mut values = vec![0.0; len];
        for k in 0..c {
            let base = (r * c + k) * len;
            let alpha = grad.data()[base..base + len].iter().sum::<f64>() / len as f64;
            for (v, &ak) in values.iter_mut().zip(&a.data()[base..base + len]) {
                *v += alpha * ak;
            }
        }
        for v in &mut values {
            *v = v.max(0.0);
        }
        maps.push(Heatmap {
            values,
            layer: layer.to_string(),
            class,
            digest: None,
            offset_scale: orig as f64 / len as f64,
        });
    }
    Ok(maps)
}

/// A heatmap scaled to peak 1.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedSnippet {
    pub values: Vec<f64>,
    /// Set when the input was all zeros and no scaling was possible.
    pub degenerate: bool,
}

/// Divides by the maximum. An all-zero input is returned unchanged and
/// flagged; negative entries are an error.
pub fn normalize_snippet(values: &[f64]) -> Result<NormalizedSnippet> {
    if let Some(&neg) = values.iter().find(|&&v| v < 0.0 || v.is_nan()) {
        return Err(Error::NegativeValue(neg));
    }
    let max = values.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(NormalizedSnippet {
            values: values.to_vec(),
            degenerate: true,
        });
    }
    Ok(NormalizedSnippet {
        values: values.iter().map(|v| v / max).collect(),
        degenerate: false,
    })
}

/// Element-wise mean of heatmaps from the same layer.
pub fn average_heatmap(maps: &[Heatmap]) -> Result<Heatmap> {
    let first = maps.first().ok_or(Error::Empty("heatmap list"))?;
    if let Some(m) = maps
        .iter()
        .find(|m| m.layer != first.layer || m.values.len() != first.values.len())
    {
        return Err(Error::InvalidShape {
            op: "average_heatmap",
            shape: vec![m.values.len()],
            reason: format!("mixes layer {} with {}", m.layer, first.layer),
        });
    }
    let k = maps.len() as f64;
    let mut values = vec![0.0; first.values.len()];
    for m in maps {
        for (v, x) in values.iter_mut().zip(&m.values) {
            *v += x / k;
        }
    }
    Ok(Heatmap {
        values,
        layer: first.layer.clone(),
        class: first.class,
        digest: None,
        offset_scale: maps.iter().map(|m| m.offset_scale).sum::<f64>() / k,
    })
}

/// One heatmap of a single sample per layer, in network order.
pub fn layer_sweep(model: &SeqNetModel, x: &Tensor, class: usize, original_length: usize) -> Result<Vec<Heatmap>> {
    model
        .spec()
        .layer_tags()
        .iter()
        .map(|tag| Ok(grad_cam(model, x, class, tag, &[original_length])?.remove(0)))
        .collect()
}

/// Writes rows of non-negative values as a binary PGM image `width` pixels
/// wide, one row per input row, each row normalized to its own peak and
/// stretched by nearest-neighbour sampling.
pub fn write_pgm<W: Write>(rows: &[Vec<f64>], width: usize, mut w: W) -> Result<()> {
    if rows.is_empty() || width == 0 {
        return Err(Error::Empty("raster"));
    }
    let mut pixels = Vec::with_capacity(rows.len() * width);
    for row in rows {
        if row.is_empty() {
            return Err(Error::Empty("raster row"));
        }
        let norm = normalize_snippet(row)?;
        for x in 0..width {
            let v = norm.values[x * row.len() / width];
            pixels.push((v * 255.0).round() as u8);
        }
    }
    let io = |e| Error::io("pgm", e);
    write!(w, "P5\n{} {}\n255\n", width, rows.len()).map_err(io)?;
    w.write_all(&pixels).map_err(io)?;
    Ok(())
}
