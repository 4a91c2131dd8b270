//! Layer propagation X ↦ φ(ÃXW), per-layer trajectory metrics, and
//! executable probes for the invariant-subspace, over-smoothing, and
//! rank-collapse results.
//!
//! Probes with closed forms (relative amplification, dominance ratios) use
//! the closed form; tests cross-validate them against explicit Kronecker
//! materialization at tiny sizes. Production paths never build a Kronecker
//! product.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{aggregation_matrix, laplacian, AggregationKind, Graph, LaplacianKind};
use crate::linalg::{numerical_rank, sym_eig, SpectralDecomposition};
use crate::matrix::{norm, DenseMatrix};
use crate::rng::Rng;

/// Norm thresholds at which rollout rescales the state to unit norm and
/// carries the factor in log space, so deep runs neither underflow nor
/// overflow. Normalized metrics are unaffected (homogeneity).
// Window chosen so squared quantities of a rescaled state stay normal floats.
const RESCALE_LOW: f64 = 1e-120;
const RESCALE_HIGH: f64 = 1e120;

/// Relative magnitude tie threshold for the dominant-eigenvalue count j.
const EIGEN_TIE_REL: f64 = 1e-9;

pub const DEFAULT_RANK_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    ReLU,
}

impl Activation {
    fn apply(self, h: DenseMatrix) -> DenseMatrix {
        match self {
            Activation::Identity => h,
            Activation::ReLU => h.map(|v| v.max(0.0)),
        }
    }
}

/// One layer of the dynamic: aggregation (n×n), feature transform (d×d),
/// and the activation applied after the product.
#[derive(Debug, Clone)]
pub struct LayerSpec {
    pub aggregation: DenseMatrix,
    pub weight: DenseMatrix,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn linear(aggregation: DenseMatrix, weight: DenseMatrix) -> Self {
        Self { aggregation, weight, activation: Activation::Identity }
    }
}

pub fn propagate(x: &DenseMatrix, layer: &LayerSpec) -> Result<DenseMatrix> {
    let a = &layer.aggregation;
    let w = &layer.weight;
    if !a.is_square() || a.cols() != x.rows() || !w.is_square() || w.rows() != x.cols() {
        return Err(Error::DimensionMismatch(format!(
            "propagate: aggregation {}x{}, state {}x{}, weight {}x{}",
            a.rows(),
            a.cols(),
            x.rows(),
            x.cols(),
            w.rows(),
            w.cols()
        )));
    }
    Ok(layer.activation.apply(a.matmul(x).matmul(w)))
}

/// tr(XᵀΔX), computed as the elementwise sum of X ⊙ (ΔX).
pub fn dirichlet_energy(x: &DenseMatrix, delta: &DenseMatrix) -> Result<f64> {
    if !delta.is_square() || delta.rows() != x.rows() {
        return Err(Error::DimensionMismatch(format!(
            "dirichlet: laplacian {}x{} vs state {}x{}",
            delta.rows(),
            delta.cols(),
            x.rows(),
            x.cols()
        )));
    }
    let dx = delta.matmul(x);
    Ok(x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum())
}

/// Dirichlet energy of X/‖X‖_F; errors on the zero state.
pub fn normalized_dirichlet(x: &DenseMatrix, delta: &DenseMatrix) -> Result<f64> {
    let nrm = x.frobenius_norm();
    if nrm == 0.0 {
        return Err(Error::ZeroState);
    }
    dirichlet_energy(&x.scaled(1.0 / nrm), delta)
}

/// Per-eigendirection masses m_i = ‖v_iᵀX‖_2. With orthonormal V this is a
/// Parseval split: Σ m_i² = ‖X‖_F².
pub fn subspace_mass(x: &DenseMatrix, spectral: &SpectralDecomposition) -> Result<Vec<f64>> {
    if spectral.dim() != x.rows() {
        return Err(Error::DimensionMismatch(format!(
            "subspace_mass: {} eigenvectors vs state with {} rows",
            spectral.dim(),
            x.rows()
        )));
    }
    let projected = spectral.eigenvectors.transpose().matmul(x);
    Ok((0..projected.rows()).map(|i| norm(projected.row(i))).collect())
}

/// ‖(W⊗Ã)(I_d⊗v_i)‖_F / ‖(W⊗Ã)(I_d⊗v_j)‖_F for the eigenvectors of a
/// symmetric aggregation, evaluated without materializing anything bigger
/// than Ãv: the numerator factors as ‖W‖_F·‖Ãv_i‖_2.
pub fn relative_amplification(
    aggregation: &DenseMatrix,
    weight: &DenseMatrix,
    i: usize,
    j: usize,
) -> Result<f64> {
    let spectral = sym_eig(aggregation)?;
    let n = spectral.dim();
    for &ix in &[i, j] {
        if ix >= n {
            return Err(Error::InvalidIndex { index: ix, nodes: n });
        }
    }
    let w_norm = weight.frobenius_norm();
    let amp = |ix: usize| {
        let v = DenseMatrix::column_vector(&spectral.eigenvector(ix));
        aggregation.matmul(&v).frobenius_norm()
    };
    let den = w_norm * amp(j);
    if den == 0.0 {
        return Err(Error::ZeroDenominator);
    }
    Ok(w_norm * amp(i) / den)
}

/// Nonsymmetric variant: amplification of explicit basis states P_i, P_j
/// under any W reduces to ‖ÃP_i‖_F/‖ÃP_j‖_F.
pub fn relative_amplification_general(
    aggregation: &DenseMatrix,
    p_i: &DenseMatrix,
    p_j: &DenseMatrix,
) -> Result<f64> {
    let den = aggregation.matmul(p_j).frobenius_norm();
    if den == 0.0 {
        return Err(Error::ZeroDenominator);
    }
    Ok(aggregation.matmul(p_i).frobenius_norm() / den)
}

/// Draws random states z ∈ Q_i = span(I_d⊗v_i), applies one linear layer,
/// and returns the largest relative component of the image outside Q_i.
/// Invariance predicts 0 up to roundoff.
pub fn check_invariance(
    aggregation: &DenseMatrix,
    weight: &DenseMatrix,
    i: usize,
    trials: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let spectral = sym_eig(aggregation)?;
    let n = spectral.dim();
    if i >= n {
        return Err(Error::InvalidIndex { index: i, nodes: n });
    }
    let d = weight.rows();
    let v = spectral.eigenvector(i);
    let vmat = DenseMatrix::column_vector(&v);
    let layer = LayerSpec::linear(aggregation.clone(), weight.clone());
    let mut worst = 0.0_f64;
    for _ in 0..trials {
        let coeffs = DenseMatrix::random_normal(1, d, 0.0, 1.0, rng);
        let z = vmat.matmul(&coeffs);
        let y = propagate(&z, &layer)?;
        let y_norm = y.frobenius_norm();
        if y_norm == 0.0 {
            continue;
        }
        // Component of y inside Q_i is v (vᵀ y); the rest is the residual.
        let inside = vmat.matmul(&vmat.transpose().matmul(&y));
        let residual = y.sub(&inside).frobenius_norm() / y_norm;
        worst = worst.max(residual);
    }
    Ok(worst)
}

/// Ratios r_l = ‖T^{(l)}…T^{(1)}S_(i)‖_F / max_p ‖T^{(l)}…T^{(1)}S_(p)‖_F
/// for l = 1..=weights.len(), via the closed form (|λ_i|/|λ_1|)^l: the
/// weight-product norms cancel between numerator and maximum. A zero
/// spectrum ties every subspace; the ratios are reported as 1.
pub fn dominance_probe(
    aggregation: &DenseMatrix,
    weights: &[DenseMatrix],
    i: usize,
) -> Result<Vec<f64>> {
    let spectral = sym_eig(aggregation)?;
    let n = spectral.dim();
    if i >= n {
        return Err(Error::InvalidIndex { index: i, nodes: n });
    }
    let top = spectral.eigenvalues[0].abs();
    let base = if top == 0.0 { 1.0 } else { spectral.eigenvalues[i].abs() / top };
    Ok((1..=weights.len()).map(|l| base.powi(l as i32)).collect())
}

/// Least-squares slope of log(series) against the index, exponentiated.
pub fn fit_geometric_rate(series: &[f64]) -> Result<f64> {
    if series.len() < 3 {
        return Err(Error::DimensionMismatch(format!(
            "geometric fit needs at least 3 points, got {}",
            series.len()
        )));
    }
    for (index, &value) in series.iter().enumerate() {
        // Rejects NaN along with non-positive values.
        if value.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::NonPositiveEntry { index, value });
        }
    }
    let k = series.len() as f64;
    let x_mean = (k - 1.0) / 2.0;
    let y_mean = series.iter().map(|v| v.ln()).sum::<f64>() / k;
    let mut num = 0.0;
    let mut den = 0.0;
    for (idx, &value) in series.iter().enumerate() {
        let dx = idx as f64 - x_mean;
        num += dx * (value.ln() - y_mean);
        den += dx * dx;
    }
    Ok((num / den).exp())
}

/// Deep linear rollout tracking the numerical rank of the normalized state.
/// Returns (rank per layer including the input, predicted bound j), where
/// j counts eigenvalues whose magnitude ties |λ_1| within 1e-9 relative.
pub fn rank_collapse_probe(
    aggregation: &DenseMatrix,
    weights: &[DenseMatrix],
    x0: &DenseMatrix,
    tol: f64,
) -> Result<(Vec<usize>, usize)> {
    let spectral = sym_eig(aggregation)?;
    let top = spectral.eigenvalues[0].abs();
    let j = if top == 0.0 {
        spectral.dim()
    } else {
        spectral
            .eigenvalues
            .iter()
            .filter(|l| l.abs() >= (1.0 - EIGEN_TIE_REL) * top)
            .count()
    };
    let mut state = x0.clone();
    let mut ranks = vec![numerical_rank(&state, tol)?];
    for w in weights {
        let layer = LayerSpec::linear(aggregation.clone(), w.clone());
        state = propagate(&state, &layer)?;
        let nrm = state.frobenius_norm();
        if nrm > 0.0 {
            // Rank is scale-invariant; renormalizing keeps deep products
            // inside the representable range.
            state.scale_in_place(1.0 / nrm);
        }
        ranks.push(numerical_rank(&state, tol)?);
    }
    Ok((ranks, j))
}

/// Laplacians (and optionally a spectral basis) against which trajectory
/// metrics are computed.
#[derive(Debug, Clone)]
pub struct MetricContext {
    pub delta_sym: DenseMatrix,
    pub delta_rw: DenseMatrix,
    pub spectral: Option<SpectralDecomposition>,
    pub rank_tol: f64,
}

impl MetricContext {
    /// Both Laplacians plus the spectral basis of the sym-normalized
    /// aggregation; requires an undirected graph without isolated nodes.
    pub fn for_graph(g: &Graph) -> Result<Self> {
        let delta_sym = laplacian(g, LaplacianKind::SymNormalized)?;
        let delta_rw = laplacian(g, LaplacianKind::RandomWalk)?;
        let agg = aggregation_matrix(g, &AggregationKind::SymNormalized)?;
        let spectral = Some(sym_eig(&agg)?);
        Ok(Self { delta_sym, delta_rw, spectral, rank_tol: DEFAULT_RANK_TOL })
    }
}

/// Metrics for one state along a rollout. Raw quantities (norm, energies,
/// masses) are reconstructed from the internally rescaled state; in extreme
/// runs they may saturate to 0/inf while the normalized columns stay exact.
#[derive(Debug, Clone, Serialize)]
pub struct TrajectoryRecord {
    pub layer: usize,
    pub fro_norm_sq: f64,
    #[serde(rename = "E_sym")]
    pub e_sym: f64,
    #[serde(rename = "E_rw")]
    pub e_rw: f64,
    #[serde(rename = "E_sym_norm")]
    pub e_sym_norm: Option<f64>,
    #[serde(rename = "E_rw_norm")]
    pub e_rw_norm: Option<f64>,
    pub rank: usize,
    #[serde(rename = "mass")]
    pub masses: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Trajectory {
    pub records: Vec<TrajectoryRecord>,
}

impl Trajectory {
    pub fn final_record(&self) -> &TrajectoryRecord {
        self.records.last().expect("trajectory holds at least the input record")
    }

    /// CSV with fixed column order: layer, fro_norm_sq, E_sym, E_rw,
    /// E_sym_norm, E_rw_norm, rank, then mass_1..mass_n (mass columns only
    /// when a spectral basis was supplied). Absent values print empty.
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        self.write_csv_with_extra(w, None)
    }

    pub fn write_csv_with_extra(
        &self,
        w: &mut impl Write,
        extra: Option<(&str, &[f64])>,
    ) -> std::io::Result<()> {
        let n_masses = self.records.first().map_or(0, |r| r.masses.len());
        let mut header = String::from("layer,fro_norm_sq,E_sym,E_rw,E_sym_norm,E_rw_norm,rank");
        for i in 1..=n_masses {
            header.push_str(&format!(",mass_{i}"));
        }
        if let Some((name, values)) = extra {
            assert_eq!(values.len(), self.records.len(), "extra column length mismatch");
            header.push(',');
            header.push_str(name);
        }
        writeln!(w, "{header}")?;
        for (idx, r) in self.records.iter().enumerate() {
            let mut line = format!(
                "{},{},{},{},{},{},{}",
                r.layer,
                fmt_f64(r.fro_norm_sq),
                fmt_f64(r.e_sym),
                fmt_f64(r.e_rw),
                r.e_sym_norm.map_or(String::new(), fmt_f64),
                r.e_rw_norm.map_or(String::new(), fmt_f64),
                r.rank
            );
            for m in &r.masses {
                line.push(',');
                line.push_str(&fmt_f64(*m));
            }
            if let Some((_, values)) = extra {
                line.push(',');
                line.push_str(&fmt_f64(values[idx]));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("trajectory serializes")
    }
}

/// Deterministic float formatting for CSV: plain decimal in a readable
/// range, scientific otherwise; both render the shortest exact round-trip.
pub fn fmt_f64(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if (1e-4..1e16).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

/// Applies the layers in order, recording metrics for the input state and
/// after every activation (layer count + 1 records).
pub fn rollout(
    x0: &DenseMatrix,
    layers: &[LayerSpec],
    ctx: &MetricContext,
) -> Result<Trajectory> {
    let mut state = x0.clone();
    let mut log_scale = 0.0_f64;
    let mut records = Vec::with_capacity(layers.len() + 1);
    records.push(measure(0, &state, log_scale, ctx)?);
    for (k, layer) in layers.iter().enumerate() {
        state = propagate(&state, layer)?;
        let nrm = state.frobenius_norm();
        if nrm > 0.0 && !(RESCALE_LOW..=RESCALE_HIGH).contains(&nrm) {
            log_scale += nrm.ln();
            state.scale_in_place(1.0 / nrm);
        }
        records.push(measure(k + 1, &state, log_scale, ctx)?);
    }
    Ok(Trajectory { records })
}

fn measure(
    layer: usize,
    state: &DenseMatrix,
    log_scale: f64,
    ctx: &MetricContext,
) -> Result<TrajectoryRecord> {
    let n_dirs = ctx.spectral.as_ref().map_or(0, SpectralDecomposition::dim);
    let nrm_sq = state.frobenius_norm_sq();
    if nrm_sq == 0.0 {
        return Ok(TrajectoryRecord {
            layer,
            fro_norm_sq: 0.0,
            e_sym: 0.0,
            e_rw: 0.0,
            e_sym_norm: None,
            e_rw_norm: None,
            rank: 0,
            masses: vec![0.0; n_dirs],
        });
    }
    let scale = log_scale.exp();
    let scale_sq = (2.0 * log_scale).exp();
    let rescaled = |v: f64, s: f64| if v == 0.0 { 0.0 } else { v * s };
    let e_sym = dirichlet_energy(state, &ctx.delta_sym)?;
    let e_rw = dirichlet_energy(state, &ctx.delta_rw)?;
    let masses = match &ctx.spectral {
        Some(spectral) => subspace_mass(state, spectral)?
            .into_iter()
            .map(|m| rescaled(m, scale))
            .collect(),
        None => Vec::new(),
    };
    Ok(TrajectoryRecord {
        layer,
        fro_norm_sq: rescaled(nrm_sq, scale_sq),
        e_sym: rescaled(e_sym, scale_sq),
        e_rw: rescaled(e_rw, scale_sq),
        e_sym_norm: Some(e_sym / nrm_sq),
        e_rw_norm: Some(e_rw / nrm_sq),
        rank: numerical_rank(state, ctx.rank_tol)?,
        masses,
    })
}
