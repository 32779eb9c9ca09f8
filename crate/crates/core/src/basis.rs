//! Piecewise-linear hat-function bases and kernel estimates built on them.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{DiffusionMode, KernelSpec, ScalarFn};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeshKind {
    Uniform,
    /// Chebyshev–Lobatto points, denser near both endpoints.
    Chebyshev,
}

/// Hat functions `φ_0..φ_{N_b-1}` on a strictly increasing mesh over `[a, b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisFamily {
    pub mesh_kind: MeshKind,
    nodes: Vec<f64>,
    /// `(a, 1 / h)` when the mesh is uniform, for direct cell lookup.
    uniform: Option<(f64, f64)>,
}

pub fn make_basis(a: f64, b: f64, nb: usize, mesh_kind: MeshKind) -> Result<BasisFamily> {
    if nb < 2 {
        return Err(Error::Config(format!("basis needs at least 2 functions (got {nb})")));
    }
    if !(a < b) || !a.is_finite() || !b.is_finite() {
        return Err(Error::Config(format!("basis interval [{a}, {b}] is empty")));
    }
    let last = nb - 1;
    let nodes = (0..nb)
        .map(|k| {
            if k == 0 {
                return a;
            }
            if k == last {
                return b;
            }
            match mesh_kind {
                MeshKind::Uniform => a + (b - a) * k as f64 / last as f64,
                MeshKind::Chebyshev if 2 * k == last => 0.5 * (a + b),
                MeshKind::Chebyshev => 0.5 * (a + b) - 0.5 * (b - a) * (PI * k as f64 / last as f64).cos(),
            }
        })
        .collect();
    BasisFamily::from_nodes(nodes, mesh_kind)
}

impl BasisFamily {
    pub fn from_nodes(nodes: Vec<f64>, mesh_kind: MeshKind) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::Config("basis needs at least 2 nodes".into()));
        }
        if nodes.iter().any(|v| !v.is_finite()) || nodes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("basis nodes must be finite and strictly increasing".into()));
        }
        let last = nodes.len() - 1;
        let h = (nodes[last] - nodes[0]) / last as f64;
        let uniform = nodes.windows(2).all(|w| ((w[1] - w[0]) - h).abs() <= 1e-12 * h);
        Ok(BasisFamily { mesh_kind, uniform: uniform.then(|| (nodes[0], 1.0 / h)), nodes })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.nodes[0], self.nodes[self.nodes.len() - 1])
    }

    /// The two possibly nonzero hats at `r`: `(k, φ_k(r), φ_{k+1}(r))`.
    /// Arguments outside the mesh are clamped to the nearest endpoint.
    #[inline(always)]
    pub fn locate(&self, r: f64) -> (usize, f64, f64) {
        let last = self.nodes.len() - 1;
        if let Some((a, inv)) = self.uniform {
            let t = ((r - a) * inv).max(0.0).min(last as f64);
            // `t` lies in `[0, last]`, so the i32 conversion is exact and cheap.
            let k = (t as i32).min(last as i32 - 1);
            let w = t - k as f64;
            return (k as usize, 1.0 - w, w);
        }
        let nodes = &self.nodes[..];
        let r = if r > nodes[0] { r.min(nodes[last]) } else { nodes[0] };
        let k = (nodes.partition_point(|&z| z <= r).max(1) - 1).min(last - 1);
        let w = (r - nodes[k]) / (nodes[k + 1] - nodes[k]);
        (k, 1.0 - w, w)
    }

    /// Adds `scale * φ(r)` into `row`.
    #[inline]
    pub fn accumulate(&self, r: f64, scale: f64, row: &mut [f64]) {
        let (k, lo, hi) = self.locate(r);
        row[k] += scale * lo;
        row[k + 1] += scale * hi;
    }

    /// `Σ_k c_k φ_k(r)`.
    #[inline]
    pub fn combine(&self, coeffs: &[f64], r: f64) -> f64 {
        let (k, lo, hi) = self.locate(r);
        coeffs[k] * lo + coeffs[k + 1] * hi
    }
}

pub fn eval_basis(basis: &BasisFamily, r: f64) -> Vec<f64> {
    let mut out = vec![0.0; basis.len()];
    basis.accumulate(r, 1.0, &mut out);
    out
}

/// Learned drift `P̂ = Σ ρ_k φ_k` and diffusion `D̂² = 2 Σ ζ_k ψ_k`.
///
/// `diffusion` holds one basis/coefficient pair for the pairwise modes and
/// either one shared or one per component in the local-state mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "EstimateWire", try_from = "EstimateWire")]
pub struct KernelEstimate {
    pub diffusion_mode: DiffusionMode,
    pub drift_basis: BasisFamily,
    pub rho: Vec<f64>,
    pub diffusion: Vec<(BasisFamily, Vec<f64>)>,
}

impl KernelEstimate {
    pub fn new(
        diffusion_mode: DiffusionMode,
        drift_basis: BasisFamily,
        rho: Vec<f64>,
        diffusion: Vec<(BasisFamily, Vec<f64>)>,
    ) -> Result<Self> {
        if rho.len() != drift_basis.len() {
            return Err(Error::Shape(format!("{} drift coefficients for {} hats", rho.len(), drift_basis.len())));
        }
        if diffusion.is_empty() || (diffusion_mode.is_pairwise() && diffusion.len() != 1) {
            return Err(Error::Shape("pairwise modes take one diffusion basis; local mode at least one".into()));
        }
        for (b, z) in &diffusion {
            if z.len() != b.len() {
                return Err(Error::Shape(format!("{} diffusion coefficients for {} hats", z.len(), b.len())));
            }
        }
        if rho.iter().chain(diffusion.iter().flat_map(|(_, z)| z)).any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite kernel coefficient".into()));
        }
        Ok(KernelEstimate { diffusion_mode, drift_basis, rho, diffusion })
    }

    /// Coefficients interpolating `p` and `d` at the mesh nodes
    /// (`ρ_k = P(r_k)`, `ζ_k = D(r_k)^2 / 2`).
    pub fn interpolating(
        diffusion_mode: DiffusionMode,
        drift_basis: BasisFamily,
        p: impl Fn(f64) -> f64,
        diffusion: Vec<(BasisFamily, ScalarFn)>,
    ) -> Result<Self> {
        let rho = drift_basis.nodes().iter().map(|&r| p(r)).collect();
        let diffusion = diffusion
            .into_iter()
            .map(|(b, f)| {
                let z = b.nodes().iter().map(|&r| 0.5 * f(r) * f(r)).collect();
                (b, z)
            })
            .collect();
        KernelEstimate::new(diffusion_mode, drift_basis, rho, diffusion)
    }

    pub fn eval_drift(&self, r: f64) -> f64 {
        self.drift_basis.combine(&self.rho, r)
    }

    fn diffusion_part(&self, component: usize) -> &(BasisFamily, Vec<f64>) {
        if self.diffusion.len() == 1 {
            &self.diffusion[0]
        } else {
            &self.diffusion[component]
        }
    }

    /// `D̂²` of `component` at `arg` (a distance or a state coordinate).
    pub fn eval_diff_sq(&self, component: usize, arg: f64) -> f64 {
        let (b, z) = self.diffusion_part(component);
        2.0 * b.combine(z, arg)
    }

    /// `sqrt(max(D̂², 0))`.
    pub fn eval_diff(&self, component: usize, arg: f64) -> f64 {
        self.eval_diff_sq(component, arg).max(0.0).sqrt()
    }

    pub fn to_kernel_spec(&self) -> KernelSpec {
        let drift_basis = self.drift_basis.clone();
        let rho = self.rho.clone();
        let drift: ScalarFn = Arc::new(move |r| drift_basis.combine(&rho, r));
        let diffusion = self
            .diffusion
            .iter()
            .map(|(b, z)| {
                let (b, z) = (b.clone(), z.clone());
                Arc::new(move |r: f64| (2.0 * b.combine(&z, r)).max(0.0).sqrt()) as ScalarFn
            })
            .collect();
        KernelSpec { drift, mode: self.diffusion_mode, diffusion }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DriftWire {
    mesh_kind: MeshKind,
    nodes: Vec<f64>,
    rho: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DiffusionWire {
    mesh_kind: MeshKind,
    nodes: Vec<f64>,
    zeta: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EstimateWire {
    diffusion_mode: DiffusionMode,
    factor_two_convention: bool,
    drift: DriftWire,
    diffusion: Vec<DiffusionWire>,
}

impl From<KernelEstimate> for EstimateWire {
    fn from(e: KernelEstimate) -> Self {
        EstimateWire {
            diffusion_mode: e.diffusion_mode,
            factor_two_convention: true,
            drift: DriftWire { mesh_kind: e.drift_basis.mesh_kind, nodes: e.drift_basis.nodes, rho: e.rho },
            diffusion: e
                .diffusion
                .into_iter()
                .map(|(b, zeta)| DiffusionWire { mesh_kind: b.mesh_kind, nodes: b.nodes, zeta })
                .collect(),
        }
    }
}

impl TryFrom<EstimateWire> for KernelEstimate {
    type Error = Error;

    fn try_from(w: EstimateWire) -> Result<Self> {
        if !w.factor_two_convention {
            return Err(Error::Config("only the D̂² = 2 Σ ζ ψ convention is supported".into()));
        }
        let drift_basis = BasisFamily::from_nodes(w.drift.nodes, w.drift.mesh_kind)?;
        let diffusion = w
            .diffusion
            .into_iter()
            .map(|d| Ok((BasisFamily::from_nodes(d.nodes, d.mesh_kind)?, d.zeta)))
            .collect::<Result<Vec<_>>>()?;
        KernelEstimate::new(w.diffusion_mode, drift_basis, w.drift.rho, diffusion)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelFn;

    #[test]
    fn uniform_and_chebyshev_nodes() {
        assert_eq!(make_basis(0.0, 2.0, 3, MeshKind::Uniform).unwrap().nodes(), &[0.0, 1.0, 2.0]);
        let c = make_basis(0.0, 2.0, 5, MeshKind::Chebyshev).unwrap();
        let s = (PI / 8.0).sin();
        let co = (PI / 8.0).cos();
        let want = [0.0, 2.0 * s * s, 1.0, 2.0 * co * co, 2.0];
        for (a, b) in c.nodes().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(make_basis(0.0, 1.0, 1, MeshKind::Uniform).is_err());
        assert!(make_basis(1.0, 1.0, 3, MeshKind::Uniform).is_err());
    }

    #[test]
    fn partition_of_unity() {
        for kind in [MeshKind::Uniform, MeshKind::Chebyshev] {
            for nb in [2, 5, 10, 21] {
                let b = make_basis(-1.0, 2.0, nb, kind).unwrap();
                for i in 0..1000 {
                    let r = -1.0 + 3.0 * i as f64 / 999.0;
                    let w = eval_basis(&b, r);
                    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
                    assert!(w.iter().all(|&v| v >= 0.0));
                    assert!(w.iter().filter(|&&v| v != 0.0).count() <= 2);
                }
            }
        }
    }

    #[test]
    fn interpolation_midpoints_and_clamping() {
        let b = make_basis(0.0, 4.0, 5, MeshKind::Uniform).unwrap();
        for k in 0..5 {
            let w = eval_basis(&b, b.nodes()[k]);
            let mut e = vec![0.0; 5];
            e[k] = 1.0;
            assert_eq!(w, e);
        }
        assert_eq!(eval_basis(&b, 1.5), vec![0.0, 0.5, 0.5, 0.0, 0.0]);
        assert_eq!(eval_basis(&b, 5.0), vec![0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(eval_basis(&b, -3.0), vec![1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn piecewise_linear_functions_are_reproduced() {
        let b = make_basis(0.0, 2.0, 7, MeshKind::Chebyshev).unwrap();
        let f = |r: f64| 3.0 * r - 1.0;
        let coeffs: Vec<f64> = b.nodes().iter().map(|&r| f(r)).collect();
        for i in 0..=100 {
            let r = 0.02 * i as f64;
            assert!((b.combine(&coeffs, r) - f(r)).abs() < 1e-14);
        }
    }

    fn estimate() -> KernelEstimate {
        let db = make_basis(0.0, 2.0, 10, MeshKind::Uniform).unwrap();
        let zb = make_basis(0.0, 2.0, 8, MeshKind::Uniform).unwrap();
        KernelEstimate::interpolating(
            DiffusionMode::PairwiseRadialDisplacement,
            db,
            |r| KernelFn::CuckerSmale {}.eval(r),
            vec![(zb, KernelFn::RationalDecay { amplitude: 0.25 }.to_fn())],
        )
        .unwrap()
    }

    #[test]
    fn ones_and_zeros() {
        let mut e = estimate();
        e.rho.iter_mut().for_each(|v| *v = 1.0);
        e.diffusion[0].1.iter_mut().for_each(|v| *v = 0.0);
        for r in [0.0, 0.3, 1.7, 2.0] {
            assert!((e.eval_drift(r) - 1.0).abs() < 1e-15);
            assert_eq!(e.eval_diff(0, r), 0.0);
        }
    }

    #[test]
    fn interpolated_diffusion_gap_matches_quadrature() {
        let e = estimate();
        let d = |r: f64| 0.25 / ((1.0 + r) * (1.0 + r));
        // Independent interpolant of D^2 on the 8 uniform nodes of [0, 2].
        let h = 2.0 / 7.0;
        let oracle = |r: f64| {
            let k = ((r / h).floor() as usize).min(6);
            let w = (r - k as f64 * h) / h;
            let sq = |r: f64| d(r) * d(r);
            ((1.0 - w) * sq(k as f64 * h) + w * sq((k + 1) as f64 * h)).sqrt()
        };
        let n = 10_000;
        let dx = 2.0 / (n - 1) as f64;
        let (mut gap, mut want, mut norm) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let r = i as f64 * dx;
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            gap += w * dx * (e.eval_diff(0, r) - d(r)).abs();
            want += w * dx * (oracle(r) - d(r)).abs();
            norm += w * dx * d(r);
        }
        assert!(((gap - want) / norm).abs() < 1e-12);
        assert!(gap / norm < 5e-2);
    }

    #[test]
    fn negative_squares_clamp_to_zero() {
        let mut e = estimate();
        e.diffusion[0].1.iter_mut().for_each(|v| *v = -1e-18);
        assert_eq!(e.eval_diff(0, 0.5), 0.0);
        assert!(e.eval_diff_sq(0, 0.5) < 0.0);
    }

    #[test]
    fn json_round_trip() {
        let e = estimate();
        let text = e.to_json().unwrap();
        assert!(text.contains("\"factor_two_convention\": true"));
        assert_eq!(KernelEstimate::from_json(&text).unwrap(), e);
        let bad = text.replace("\"factor_two_convention\": true", "\"factor_two_convention\": false");
        assert!(KernelEstimate::from_json(&bad).is_err());
    }

    /// Hat values straight from the definition.
    fn hats(nodes: &[f64], r: f64) -> Vec<f64> {
        let r = r.clamp(nodes[0], nodes[nodes.len() - 1]);
        (0..nodes.len())
            .map(|k| {
                let left = k.checked_sub(1).map(|j| nodes[j]);
                let right = nodes.get(k + 1).copied();
                let z = nodes[k];
                match (left, right) {
                    (Some(a), _) if r >= a && r <= z => (r - a) / (z - a),
                    (_, Some(b)) if r >= z && r <= b => (b - r) / (b - z),
                    _ if r == z => 1.0,
                    _ => 0.0,
                }
            })
            .collect()
    }

    proptest::proptest! {
        #[test]
        fn lookup_matches_the_hat_definition(
            a in -3.0f64..3.0,
            len in 0.1f64..5.0,
            nb in 2usize..20,
            r in -10.0f64..10.0,
            cheb in proptest::bool::ANY,
        ) {
            let kind = if cheb { MeshKind::Chebyshev } else { MeshKind::Uniform };
            let basis = make_basis(a, a + len, nb, kind).unwrap();
            let want = hats(basis.nodes(), r);
            let got = eval_basis(&basis, r);
            for (g, w) in got.iter().zip(&want) {
                proptest::prop_assert!((g - w).abs() < 1e-9, "{:?} vs {:?}", got, want);
            }
        }
    }
}
