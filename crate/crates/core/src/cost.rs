//! Analytic parameter and multiply-add accounting.
//!
//! Multiply-adds count kernel multiplications of convolution and dense
//! layers only; bias additions, normalization, activations and pooling are
//! not counted. For sequence layers `n` is the output length.

use std::io::Write;

use num_rational::Ratio;
use serde::Serialize;

use crate::autodiff::Graph;
use crate::error::Result;
use crate::model::{ModelSpec, SeqNetModel, NUM_CLASSES};
use crate::tensor::Tensor;

/// Reference cost of the default model, in MFlops.
pub const REFERENCE_MFLOPS: f64 = 193.0;

/// Standard 2-D convolution over an `n×n` map: `n·n·c′·c·k·k`.
pub fn cal_common(n: u64, c: u64, c_out: u64, k: u64) -> u64 {
    n * n * c_out * c * k * k
}

/// 2-D depthwise separable convolution: `n·n·c·k·k + n·n·c′·c`.
pub fn cal_dsc(n: u64, c: u64, c_out: u64, k: u64) -> u64 {
    n * n * c * k * k + n * n * c_out * c
}

/// Sequence depthwise separable convolution over `n²` positions with a
/// `k×1` kernel: `n²·c·k + n²·c′·c`.
pub fn cal_sdsc(n2: u64, c: u64, c_out: u64, k: u64) -> u64 {
    n2 * c * k + n2 * c_out * c
}

/// `Cal_DSC / Cal_com` as an exact fraction.
pub fn dsc_ratio(n: u64, c: u64, c_out: u64, k: u64) -> Ratio<u64> {
    Ratio::new(cal_dsc(n, c, c_out, k), cal_common(n, c, c_out, k))
}

/// `Cal_SDSC / Cal_com` with the sequence length equal to the map's `n²`.
pub fn sdsc_ratio(n: u64, c: u64, c_out: u64, k: u64) -> Ratio<u64> {
    Ratio::new(cal_sdsc(n * n, c, c_out, k), cal_common(n, c, c_out, k))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Depthwise,
    Pointwise,
    Norm,
    Dense,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostRow {
    pub name: String,
    pub kind: LayerKind,
    pub n: u64,
    pub c: u64,
    pub c_out: u64,
    pub k: u64,
    pub params: u64,
    pub macs: u64,
}

impl CostRow {
    /// Closed-form multiply-adds for this row's geometry.
    pub fn analytic_macs(&self) -> u64 {
        match self.kind {
            LayerKind::Conv => self.n * self.c_out * self.c * self.k,
            LayerKind::Depthwise => self.n * self.c * self.k,
            LayerKind::Pointwise => self.n * self.c_out * self.c,
            LayerKind::Dense => self.c_out * self.c,
            LayerKind::Norm => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
}

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    pub fn mflops(&self) -> f64 {
        self.total_macs() as f64 / 1e6
    }

    /// CSV with header `layer,name,n,c,c_out,k,params,macs` and a final
    /// `total` row.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["layer", "name", "n", "c", "c_out", "k", "params", "macs"])?;
        for (i, r) in self.rows.iter().enumerate() {
            out.write_record([
                i.to_string(),
                r.name.clone(),
                r.n.to_string(),
                r.c.to_string(),
                r.c_out.to_string(),
                r.k.to_string(),
                r.params.to_string(),
                r.macs.to_string(),
            ])?;
        }
        out.write_record([
            String::new(),
            "total".into(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            self.total_params().to_string(),
            self.total_macs().to_string(),
        ])?;
        out.flush().map_err(|e| crate::error::Error::io("csv", e))?;
        Ok(())
    }
}

/// Per-layer parameter and multiply-add counts for one input of
/// `spec.input_length`, derived from the spec alone.
pub fn count_params(spec: &ModelSpec) -> CostReport {
    let mut rows = Vec::new();
    let mut push = |name: String, kind, n: usize, c: usize, c_out: usize, k: usize, params: usize| {
        let mut row = CostRow {
            name,
            kind,
            n: n as u64,
            c: c as u64,
            c_out: c_out as u64,
            k: k as u64,
            params: params as u64,
            macs: 0,
        };
        row.macs = row.analytic_macs();
        rows.push(row);
    };
    let stem = spec.stem;
    let mut len = stem.output_length(spec.input_length).unwrap_or(0);
    push("stem".into(), LayerKind::Conv, len, 1, stem.out_channels, stem.kernel, stem.param_count());
    push("stem.bn".into(), LayerKind::Norm, len, stem.out_channels, stem.out_channels, 1, 2 * stem.out_channels);

    let mut block = |prefix: String, b: &crate::layers::SdscBlockSpec, len: usize| {
        let dw = b.depthwise();
        let pw = b.pointwise();
        push(format!("{prefix}.dw"), LayerKind::Depthwise, len, b.in_channels, b.in_channels, b.kernel, dw.param_count());
        push(format!("{prefix}.bn1"), LayerKind::Norm, len, b.in_channels, b.in_channels, 1, 2 * b.in_channels);
        push(format!("{prefix}.pw"), LayerKind::Pointwise, len, b.in_channels, b.out_channels, 1, pw.param_count());
        push(format!("{prefix}.bn2"), LayerKind::Norm, len, b.out_channels, b.out_channels, 1, 2 * b.out_channels);
    };
    for (i, st) in spec.stages.iter().enumerate() {
        block(format!("stage{}", i + 1), &st.block, len);
        len = (len - st.pool_window) / st.pool_stride + 1;
    }
    let trunk = spec.trunk_spec();
    for i in 0..spec.trunk_blocks {
        block(format!("res{}", i + 1), &trunk, len);
    }
    let f = spec.trunk_channels;
    push("head".into(), LayerKind::Dense, 1, f, NUM_CLASSES, 1, f * NUM_CLASSES + NUM_CLASSES);
    CostReport { rows }
}

/// Multiply-adds tallied by an instrumented forward pass over `x`.
pub fn empirical_cost(model: &SeqNetModel, x: &Tensor) -> Result<u64> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    model.forward_graph(&mut g, xv, model.mode, false)?;
    Ok(g.macs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{BlockKind, SdscBlockSpec};

    #[test]
    fn closed_form_counts() {
        let b = SdscBlockSpec::new(BlockKind::Residual, 128, 128).unwrap();
        assert_eq!(b.pointwise().param_count(), 16512);
        assert_eq!(b.depthwise().param_count(), 512);
        assert_eq!(cal_sdsc(4, 3, 8, 3), 132);
    }

    #[test]
    fn ratio_example() {
        let r = sdsc_ratio(5, 7, 128, 3);
        assert_eq!(r, Ratio::new(1, 128 * 3) + Ratio::new(1, 9));
        let v = *r.numer() as f64 / *r.denom() as f64;
        assert!((v - 0.113715277).abs() < 1e-9, "{v}");
        assert_eq!(dsc_ratio(5, 7, 128, 3), Ratio::new(1, 128) + Ratio::new(1, 9));
    }

    #[test]
    fn pointwise_hand_count() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 10]));
        let w = g.constant(Tensor::zeros(&[3, 2]));
        g.pointwise_conv1d(x, w, None).unwrap();
        assert_eq!(g.macs(), 60);
    }

    #[test]
    fn report_matches_instantiated_params() {
        for spec in [ModelSpec::toy(), ModelSpec::desk(), ModelSpec::default()] {
            let report = count_params(&spec);
            let model = SeqNetModel::build(spec, 0).unwrap();
            assert_eq!(report.total_params(), model.param_count() as u64);
        }
    }

    #[test]
    fn toy_counted_equals_analytic() {
        let spec = ModelSpec::toy();
        let model = SeqNetModel::build(spec.clone(), 0).unwrap();
        let counted = empirical_cost(&model, &Tensor::zeros(&[1, 1, 512])).unwrap();
        assert_eq!(counted, count_params(&spec).total_macs());
    }

    #[test]
    fn csv_layout() {
        let mut buf = Vec::new();
        count_params(&ModelSpec::toy()).write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "layer,name,n,c,c_out,k,params,macs");
        assert!(lines.next().unwrap().starts_with("0,stem,512,1,8,3,"));
        assert!(text.lines().last().unwrap().starts_with(",total,"));
    }
}
