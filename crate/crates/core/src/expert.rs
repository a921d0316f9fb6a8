//! Expert parameters: a bank of per-expert affine maps sharing one activation.
//!
//! Every expert k is the map x -> act(x W_k + b_k), with W_k of shape
//! d_in x d_out and b_k of length d_out. Whether the activation is applied
//! per expert or after mixing is a layer-level choice, so `expert_forward`
//! takes an explicit flag instead of deciding on its own.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix2D, Rng};

/// Elementwise nonlinearity shared by all experts in a bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Identity,
    Relu,
    Gelu,
    Tanh,
}

impl ActivationKind {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            ActivationKind::Identity => z,
            ActivationKind::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            // Tanh form of gelu; the canonical formula for this repo.
            ActivationKind::Gelu => {
                const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
                0.5 * z * (1.0 + (C * (z + 0.044715 * z * z * z)).tanh())
            }
            ActivationKind::Tanh => z.tanh(),
        }
    }

    /// Pointwise derivative. Relu uses the zero subgradient at the kink.
    pub fn grad(self, z: f64) -> f64 {
        match self {
            ActivationKind::Identity => 1.0,
            ActivationKind::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Gelu => {
                const C: f64 = 0.797_884_560_802_865_4;
                let inner = C * (z + 0.044715 * z * z * z);
                let t = inner.tanh();
                0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * z * z)
            }
            ActivationKind::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Identity => "identity",
            ActivationKind::Relu => "relu",
            ActivationKind::Gelu => "gelu",
            ActivationKind::Tanh => "tanh",
        }
    }

    fn tag(self) -> u8 {
        match self {
            ActivationKind::Identity => 0,
            ActivationKind::Relu => 1,
            ActivationKind::Gelu => 2,
            ActivationKind::Tanh => 3,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(ActivationKind::Identity),
            1 => Ok(ActivationKind::Relu),
            2 => Ok(ActivationKind::Gelu),
            3 => Ok(ActivationKind::Tanh),
            other => Err(Error::BankFormat(format!("unknown activation tag {other}"))),
        }
    }
}

/// Where the nonlinearity sits relative to score mixing: applied inside each
/// expert before the weighted sum, or once outside on the mixed pre-activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationPlacement {
    #[serde(rename = "inside")]
    InsideExperts,
    #[serde(rename = "outside")]
    OutsideExperts,
}

impl ActivationPlacement {
    pub fn name(self) -> &'static str {
        match self {
            ActivationPlacement::InsideExperts => "inside",
            ActivationPlacement::OutsideExperts => "outside",
        }
    }
}

const BANK_MAGIC: &[u8; 4] = b"MEOB";
const BANK_VERSION: u32 = 1;

/// Bank of n experts with identical shapes and a shared activation.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBank {
    d_in: usize,
    d_out: usize,
    weights: Vec<Matrix2D>,
    biases: Vec<Vec<f64>>,
    activation: ActivationKind,
}

impl ExpertBank {
    /// Seeded init: weights uniform in (-a, a) with a = sqrt(6 / (d_in + d_out)),
    /// biases zero. Experts are drawn in index order, row-major within each
    /// weight matrix, so one seed fixes every parameter bit.
    pub fn init(
        n: usize,
        d_in: usize,
        d_out: usize,
        activation: ActivationKind,
        seed: u64,
    ) -> Result<Self> {
        if n == 0 || d_in == 0 || d_out == 0 {
            return Err(Error::EmptyInput("ExpertBank::init"));
        }
        let a = (6.0 / (d_in + d_out) as f64).sqrt();
        let mut rng = Rng::new(seed);
        let weights = (0..n)
            .map(|_| Matrix2D::random_uniform(d_in, d_out, -a, a, &mut rng))
            .collect();
        let biases = vec![vec![0.0; d_out]; n];
        Ok(Self { d_in, d_out, weights, biases, activation })
    }

    pub fn from_parts(
        weights: Vec<Matrix2D>,
        biases: Vec<Vec<f64>>,
        activation: ActivationKind,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::EmptyInput("ExpertBank::from_parts"));
        }
        let (d_in, d_out) = weights[0].shape();
        for w in &weights {
            if w.shape() != (d_in, d_out) {
                return Err(Error::ShapeMismatch {
                    op: "ExpertBank::from_parts",
                    left: (d_in, d_out),
                    right: w.shape(),
                });
            }
        }
        for b in &biases {
            if b.len() != d_out {
                return Err(Error::DataLength { rows: 1, cols: d_out, got: b.len() });
            }
        }
        Ok(Self { d_in, d_out, weights, biases, activation })
    }

    pub fn n_experts(&self) -> usize {
        self.weights.len()
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn activation(&self) -> ActivationKind {
        self.activation
    }

    pub fn weight(&self, k: usize) -> &Matrix2D {
        &self.weights[k]
    }

    pub fn bias(&self, k: usize) -> &[f64] {
        &self.biases[k]
    }

    pub fn weight_mut(&mut self, k: usize) -> &mut Matrix2D {
        &mut self.weights[k]
    }

    pub fn bias_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.biases[k]
    }

    /// One expert applied to a whole batch: act(x W_k + b_k) if
    /// `apply_activation`, otherwise the bare affine map.
    pub fn expert_forward(
        &self,
        k: usize,
        x: &Matrix2D,
        apply_activation: bool,
    ) -> Result<Matrix2D> {
        if k >= self.n_experts() {
            return Err(Error::IndexOutOfRange {
                what: "expert",
                index: k,
                len: self.n_experts(),
            });
        }
        let mut out = x.matmul(&self.weights[k])?;
        let bias = &self.biases[k];
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            for j in 0..self.d_out {
                row[j] += bias[j];
            }
        }
        if apply_activation {
            let act = self.activation;
            out = out.map(|v| act.apply(v));
        }
        Ok(out)
    }

    /// Flat binary layout: 4-byte magic "MEOB", u32 version, u64 n / d_in /
    /// d_out, one activation tag byte, then little-endian f64 payload with
    /// all weights first and all biases after, expert-major, row-major inside
    /// each weight matrix.
    pub fn save(&self, path: &Path) -> Result<()> {
        let n = self.n_experts();
        let mut buf =
            Vec::with_capacity(33 + 8 * n * (self.d_in * self.d_out + self.d_out));
        buf.extend_from_slice(BANK_MAGIC);
        buf.extend_from_slice(&BANK_VERSION.to_le_bytes());
        buf.extend_from_slice(&(n as u64).to_le_bytes());
        buf.extend_from_slice(&(self.d_in as u64).to_le_bytes());
        buf.extend_from_slice(&(self.d_out as u64).to_le_bytes());
        buf.push(self.activation.tag());
        for w in &self.weights {
            for v in w.as_slice() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        for b in &self.biases {
            for v in b {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.len() < 33 {
            return Err(Error::BankFormat(format!(
                "file too short for header: {} bytes",
                bytes.len()
            )));
        }
        if &bytes[0..4] != BANK_MAGIC {
            return Err(Error::BankFormat("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != BANK_VERSION {
            return Err(Error::BankFormat(format!(
                "unsupported version {version}, expected {BANK_VERSION}"
            )));
        }
        let read_u64 = |off: usize| u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        let n = read_u64(8) as usize;
        let d_in = read_u64(16) as usize;
        let d_out = read_u64(24) as usize;
        let activation = ActivationKind::from_tag(bytes[32])?;
        if n == 0 || d_in == 0 || d_out == 0 {
            return Err(Error::BankFormat(format!(
                "degenerate dimensions n={n} d_in={d_in} d_out={d_out}"
            )));
        }
        let expected = 33 + 8 * (n * d_in * d_out + n * d_out);
        if bytes.len() != expected {
            return Err(Error::BankFormat(format!(
                "payload length {} does not match header, expected {expected}",
                bytes.len()
            )));
        }
        let mut off = 33;
        let mut next_f64 = || {
            let v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
            off += 8;
            v
        };
        let mut weights = Vec::with_capacity(n);
        for _ in 0..n {
            let data: Vec<f64> = (0..d_in * d_out).map(|_| next_f64()).collect();
            weights.push(Matrix2D::new(d_in, d_out, data)?);
        }
        let mut biases = Vec::with_capacity(n);
        for _ in 0..n {
            biases.push((0..d_out).map(|_| next_f64()).collect());
        }
        Ok(Self { d_in, d_out, weights, biases, activation })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let bank = ExpertBank::from_parts(
            vec![Matrix2D::identity(2)],
            vec![vec![0.0, 0.0]],
            ActivationKind::Relu,
        )
        .unwrap();
        let x = Matrix2D::from_rows(&[vec![-1.0, 2.0]]).unwrap();
        let y = bank.expert_forward(0, &x, true).unwrap();
        assert_eq!(y.row(0), &[0.0, 2.0]);
    }

    #[test]
    fn gelu_matches_frozen_values() {
        // Reference values computed independently from the tanh-form formula.
        let cases = [
            (1.0, 0.8411919906082768),
            (-0.5, -0.15428599017485606),
            (2.0, 1.954597694087775),
            (0.0, 0.0),
        ];
        for (z, expected) in cases {
            assert!(
                (ActivationKind::Gelu.apply(z) - expected).abs() < 1e-15,
                "gelu({z})"
            );
        }
    }

    #[test]
    fn activation_grads_match_frozen_values() {
        assert!((ActivationKind::Gelu.grad(1.0) - 1.0829640838457826).abs() < 1e-15);
        assert!((ActivationKind::Gelu.grad(0.0) - 0.5).abs() < 1e-15);
        assert!((ActivationKind::Tanh.grad(0.7) - 0.6347395899824584).abs() < 1e-15);
        assert_eq!(ActivationKind::Relu.grad(-0.1), 0.0);
        assert_eq!(ActivationKind::Relu.grad(0.1), 1.0);
        assert_eq!(ActivationKind::Identity.grad(123.0), 1.0);
    }

    #[test]
    fn activation_grads_match_central_differences() {
        let eps = 1e-6;
        for act in [ActivationKind::Gelu, ActivationKind::Tanh, ActivationKind::Identity] {
            for z in [-1.3, -0.2, 0.4, 1.7] {
                let fd = (act.apply(z + eps) - act.apply(z - eps)) / (2.0 * eps);
                assert!(
                    (fd - act.grad(z)).abs() < 1e-8,
                    "{} at z={z}: fd {fd} vs grad {}",
                    act.name(),
                    act.grad(z)
                );
            }
        }
    }

    #[test]
    fn init_is_seed_deterministic_and_bounded() {
        let a = ExpertBank::init(3, 5, 4, ActivationKind::Gelu, 7).unwrap();
        let b = ExpertBank::init(3, 5, 4, ActivationKind::Gelu, 7).unwrap();
        assert_eq!(a, b);
        let bound = (6.0f64 / 9.0).sqrt(); // 0.816496580927726 for d_in=5, d_out=4
        for k in 0..3 {
            assert!(a.weight(k).as_slice().iter().all(|v| v.abs() < bound));
            assert!(a.bias(k).iter().all(|&v| v == 0.0));
        }
        let c = ExpertBank::init(3, 5, 4, ActivationKind::Gelu, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn expert_forward_is_affine_plus_activation() {
        let w = Matrix2D::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let bank = ExpertBank::from_parts(
            vec![w],
            vec![vec![10.0, -10.0]],
            ActivationKind::Relu,
        )
        .unwrap();
        let x = Matrix2D::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let raw = bank.expert_forward(0, &x, false).unwrap();
        assert_eq!(raw.row(0), &[11.0, -6.0]);
        assert_eq!(raw.row(1), &[13.0, -2.0]);
        let act = bank.expert_forward(0, &x, true).unwrap();
        assert_eq!(act.row(0), &[11.0, 0.0]);
        assert_eq!(act.row(1), &[13.0, 0.0]);
    }

    #[test]
    fn bias_free_expert_is_homogeneous_in_x() {
        // Scaling by a power of two is exact in binary floating point, so the
        // linearity check can demand bit equality.
        let mut rng = Rng::new(21);
        let w = Matrix2D::random_uniform(4, 3, -1.0, 1.0, &mut rng);
        let bank =
            ExpertBank::from_parts(vec![w], vec![vec![0.0; 3]], ActivationKind::Identity).unwrap();
        let x = Matrix2D::random_uniform(2, 4, -1.0, 1.0, &mut rng);
        let lhs = bank.expert_forward(0, &x.scale(2.0), false).unwrap();
        let rhs = bank.expert_forward(0, &x, false).unwrap().scale(2.0);
        assert_eq!(lhs, rhs);
        // Generic scalars only agree up to rounding.
        let a = 1.7;
        let lhs = bank.expert_forward(0, &x.scale(a), false).unwrap();
        let rhs = bank.expert_forward(0, &x, false).unwrap().scale(a);
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }

    #[test]
    fn identity_activation_flag_is_a_no_op() {
        let bank = ExpertBank::init(2, 3, 3, ActivationKind::Identity, 4).unwrap();
        let mut rng = Rng::new(5);
        let x = Matrix2D::random_uniform(2, 3, -1.0, 1.0, &mut rng);
        assert_eq!(
            bank.expert_forward(0, &x, true).unwrap(),
            bank.expert_forward(0, &x, false).unwrap()
        );
    }

    #[test]
    fn save_load_round_trip_is_bit_identical() {
        let dir = std::env::temp_dir().join("meo_bank_roundtrip");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bank.meob");
        let mut bank = ExpertBank::init(3, 4, 2, ActivationKind::Tanh, 99).unwrap();
        bank.bias_mut(1)[0] = -0.125; // make biases nontrivial
        bank.save(&path).unwrap();
        let loaded = ExpertBank::load(&path).unwrap();
        assert_eq!(bank, loaded);
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn load_rejects_bad_magic() {
        let dir = std::env::temp_dir().join("meo_bank_badmagic");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bank.meob");
        fs::write(&path, b"NOPE lots of junk that is long enough to pass the header check")
            .unwrap();
        let err = ExpertBank::load(&path).unwrap_err();
        assert!(matches!(err, Error::BankFormat(_)), "got {err:?}");
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn load_rejects_truncation() {
        let dir = std::env::temp_dir().join("meo_bank_trunc");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bank.meob");
        let bank = ExpertBank::init(2, 3, 3, ActivationKind::Relu, 1).unwrap();
        bank.save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        let err = ExpertBank::load(&path).unwrap_err();
        assert!(matches!(err, Error::BankFormat(_)), "got {err:?}");
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn missing_file_reports_io_error() {
        let err = ExpertBank::load(Path::new("/definitely/not/here.meob")).unwrap_err();
        assert!(matches!(err, Error::Io(_)), "got {err:?}");
    }

    #[test]
    fn bert_base_expert_parameter_count() {
        // Fused FFN expert at d=768, d_ff=3072: 768*3072 = 2359296 weights
        // plus 3072 biases, 2362368 parameters in total.
        let (d, d_ff) = (768usize, 3072usize);
        assert_eq!(d * d_ff, 2_359_296);
        assert_eq!(d * d_ff + d_ff, 2_362_368);
    }
}
