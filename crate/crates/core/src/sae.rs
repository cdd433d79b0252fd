// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sparse autoencoder forward pass.
//!
//! ```text
//! pre  = W_e · z − b_e
//! h    = TopK_k(pre)      (signed values kept, ties → lower index)
//!      | max(pre, 0)      (ReLU law)
//! ẑ    = W_d · h + b_d
//! ```
//!
//! `W_e` is `s × d`, `W_d` is `d × s`. The encoder and decoder carry
//! separate biases. Internally the decoder is stored column-major (one
//! contiguous length-`d` atom per hidden unit) so sparse decodes touch only
//! the active atoms; the model file stores `W_d` row-major as documented in
//! [`save_model`].

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation_io::{
    read_exact_or, read_f32s, u32_at, u64_at, write_atomic, write_f32s, ActivationDump,
    PairedStream, Space, MAX_AXIS,
};
use crate::error::{ensure, Error, Result};
use crate::linalg::{axpy, Matrix, Real};

pub const MODEL_MAGIC: [u8; 4] = *b"STSM";
pub const MODEL_VERSION: u32 = 1;
const MODEL_HEADER_LEN: usize = 4 + 4 + 8 + 8 + 4 + 8;

/// Rows encoded per GEMM call. Fixed so results never depend on thread count.
const ENCODE_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActivationLaw {
    TopK { k: usize },
    Relu,
}

impl ActivationLaw {
    pub fn validate(&self, s: usize) -> Result<()> {
        if let ActivationLaw::TopK { k } = *self {
            ensure!(k >= 1 && k <= s, "TopK k = {k} must lie in 1..={s}");
        }
        Ok(())
    }
}

impl std::fmt::Display for ActivationLaw {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ActivationLaw::TopK { k } => write!(f, "topk(k={k})"),
            ActivationLaw::Relu => f.write_str("relu"),
        }
    }
}

/// Keeps the `k` largest entries of `v` and zeroes the rest.
///
/// Ties are resolved in favour of the lower index.
pub fn topk_select<T: Real>(v: &[T], k: usize) -> Result<Vec<T>> {
    ensure!(
        k >= 1 && k <= v.len(),
        "k = {k} out of range for a vector of length {}",
        v.len()
    );
    let mut idx = Vec::new();
    topk_indices(v, k, &mut idx);
    let mut out = vec![T::zero(); v.len()];
    for &i in &idx {
        out[i as usize] = v[i as usize];
    }
    Ok(out)
}

/// Fills `idx` with the indices of the top-`k` entries, ascending.
pub(crate) fn topk_indices<T: Real>(v: &[T], k: usize, idx: &mut Vec<u32>) {
    idx.clear();
    idx.extend(0..v.len() as u32);
    if k < v.len() {
        let by_rank = |a: &u32, b: &u32| {
            v[*b as usize]
                .partial_cmp(&v[*a as usize])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(b))
        };
        idx.select_nth_unstable_by(k - 1, by_rank);
        idx.truncate(k);
        idx.sort_unstable();
    }
}

/// Sparse codes in compressed-row form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCodes<T> {
    s: usize,
    offsets: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<T>,
}

impl<T: Real> SparseCodes<T> {
    fn new(s: usize) -> Self {
        Self {
            s,
            offsets: vec![0],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn width(&self) -> usize {
        self.s
    }

    pub fn row(&self, i: usize) -> (&[u32], &[T]) {
        let r = self.offsets[i]..self.offsets[i + 1];
        (&self.indices[r.clone()], &self.values[r])
    }

    fn push_row(&mut self, idx: impl IntoIterator<Item = (u32, T)>) {
        for (i, v) in idx {
            self.indices.push(i);
            self.values.push(v);
        }
        self.offsets.push(self.indices.len());
    }

    fn append(&mut self, other: SparseCodes<T>) {
        let base = self.indices.len();
        self.indices.extend(other.indices);
        self.values.extend(other.values);
        self.offsets
            .extend(other.offsets[1..].iter().map(|o| o + base));
    }

    /// Number of stored entries whose value is non-zero.
    pub fn nonzeros(&self) -> usize {
        self.values.iter().filter(|v| **v != T::zero()).count()
    }
}

impl SparseCodes<f32> {
    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.rows(), self.s);
        for i in 0..self.rows() {
            let (idx, val) = self.row(i);
            let row = m.row_mut(i);
            for (&j, &v) in idx.iter().zip(val) {
                row[j as usize] = v;
            }
        }
        m
    }
}

/// Encoder/decoder weights of a sparse autoencoder.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeModel<T: Real = f32> {
    d: usize,
    s: usize,
    law: ActivationLaw,
    /// `s × d`, row-major.
    pub(crate) w_enc: Vec<T>,
    pub(crate) b_enc: Vec<T>,
    /// Decoder columns: atom `j` occupies `[j*d, (j+1)*d)`.
    pub(crate) atoms: Vec<T>,
    pub(crate) b_dec: Vec<T>,
}

impl<T: Real> SaeModel<T> {
    /// Builds a model. `atoms` holds the decoder columns back to back
    /// (i.e. `W_dᵀ` row-major).
    pub fn new(
        d: usize,
        s: usize,
        law: ActivationLaw,
        w_enc: Vec<T>,
        b_enc: Vec<T>,
        atoms: Vec<T>,
        b_dec: Vec<T>,
    ) -> Result<Self> {
        ensure!(d >= 1 && s >= 1, "model dims must be positive (d={d}, s={s})");
        law.validate(s)?;
        ensure!(w_enc.len() == s * d, "encoder has {} weights, expected {}", w_enc.len(), s * d);
        ensure!(b_enc.len() == s, "encoder bias has {} entries, expected {s}", b_enc.len());
        ensure!(atoms.len() == s * d, "decoder has {} weights, expected {}", atoms.len(), s * d);
        ensure!(b_dec.len() == d, "decoder bias has {} entries, expected {d}", b_dec.len());
        let model = Self {
            d,
            s,
            law,
            w_enc,
            b_enc,
            atoms,
            b_dec,
        };
        ensure!(model.is_finite(), "model contains non-finite parameters");
        Ok(model)
    }

    /// Builds a model from a row-major `d × s` decoder matrix.
    pub fn from_decoder_matrix(
        d: usize,
        s: usize,
        law: ActivationLaw,
        w_enc: Vec<T>,
        b_enc: Vec<T>,
        w_dec: &[T],
        b_dec: Vec<T>,
    ) -> Result<Self> {
        ensure!(w_dec.len() == d * s, "decoder has {} weights, expected {}", w_dec.len(), d * s);
        Self::new(d, s, law, w_enc, b_enc, transpose(w_dec, d, s), b_dec)
    }

    /// `s = d`, identity encoder and decoder, zero biases.
    pub fn identity(d: usize, law: ActivationLaw) -> Result<Self> {
        let mut eye = vec![T::zero(); d * d];
        for i in 0..d {
            eye[i * d + i] = T::one();
        }
        Self::new(d, d, law, eye.clone(), vec![T::zero(); d], eye, vec![T::zero(); d])
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn law(&self) -> ActivationLaw {
        self.law
    }

    pub fn w_enc(&self) -> &[T] {
        &self.w_enc
    }

    pub fn b_enc(&self) -> &[T] {
        &self.b_enc
    }

    pub fn b_dec(&self) -> &[T] {
        &self.b_dec
    }

    /// Column `j` of `W_d`.
    pub fn atom(&self, j: usize) -> &[T] {
        &self.atoms[j * self.d..(j + 1) * self.d]
    }

    /// All decoder columns back to back (`W_dᵀ`, row-major `s × d`).
    pub fn atoms(&self) -> &[T] {
        &self.atoms
    }

    /// `W_d` as a row-major `d × s` matrix.
    pub fn w_dec_row_major(&self) -> Vec<T> {
        transpose(&self.atoms, self.s, self.d)
    }

    pub fn is_finite(&self) -> bool {
        [&self.w_enc, &self.b_enc, &self.atoms, &self.b_dec]
            .iter()
            .all(|p| p.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> SaeModel<U> {
        let c = |v: &[T]| v.iter().map(|x| U::from(*x).unwrap()).collect::<Vec<U>>();
        SaeModel {
            d: self.d,
            s: self.s,
            law: self.law,
            w_enc: c(&self.w_enc),
            b_enc: c(&self.b_enc),
            atoms: c(&self.atoms),
            b_dec: c(&self.b_dec),
        }
    }

    pub fn encode(&self, z: &[T]) -> Result<Vec<T>> {
        ensure!(z.len() == self.d, "input has length {}, model expects {}", z.len(), self.d);
        ensure!(z.iter().all(|v| v.is_finite()), "input contains non-finite values");
        let codes = self.encode_rows(z, 1);
        let mut h = vec![T::zero(); self.s];
        let (idx, val) = codes.row(0);
        for (&j, &v) in idx.iter().zip(val) {
            h[j as usize] = v;
        }
        Ok(h)
    }

    pub fn decode(&self, h: &[T]) -> Result<Vec<T>> {
        ensure!(h.len() == self.s, "code has length {}, model expects {}", h.len(), self.s);
        ensure!(h.iter().all(|v| v.is_finite()), "code contains non-finite values");
        let mut out = self.b_dec.clone();
        for (j, &hj) in h.iter().enumerate() {
            if hj != T::zero() {
                axpy(hj, self.atom(j), &mut out);
            }
        }
        Ok(out)
    }

    /// Decodes one sparse row into `out` (overwritten).
    pub(crate) fn decode_sparse_into(&self, idx: &[u32], val: &[T], out: &mut [T]) {
        out.copy_from_slice(&self.b_dec);
        for (&j, &v) in idx.iter().zip(val) {
            if v != T::zero() {
                axpy(v, self.atom(j as usize), out);
            }
        }
    }

    /// `n × s` pre-activations for `n` row-major inputs.
    pub(crate) fn pre_activations(&self, rows: &[T], n: usize, out: &mut Vec<T>) {
        out.resize(n * self.s, T::zero());
        T::gemm_abt(rows, n, self.d, &self.w_enc, self.s, out);
        for row in out.chunks_exact_mut(self.s) {
            for (a, &b) in row.iter_mut().zip(&self.b_enc) {
                *a -= b;
            }
        }
    }

    /// Active set of one pre-activation row under the model's law.
    pub(crate) fn activate(&self, pre: &[T], scratch: &mut Vec<u32>, codes: &mut SparseCodes<T>) {
        match self.law {
            ActivationLaw::TopK { k } => {
                topk_indices(pre, k, scratch);
                codes.push_row(scratch.iter().map(|&j| (j, pre[j as usize])));
            }
            ActivationLaw::Relu => {
                codes.push_row(
                    pre.iter()
                        .enumerate()
                        .filter(|(_, &a)| a > T::zero())
                        .map(|(j, &a)| (j as u32, a)),
                );
            }
        }
    }

    /// Encodes `n` row-major inputs. Rows are processed in fixed-size chunks
    /// in parallel; the result does not depend on the thread count.
    pub fn encode_rows(&self, rows: &[T], n: usize) -> SparseCodes<T> {
        assert_eq!(rows.len(), n * self.d, "input block shape mismatch");
        let parts: Vec<SparseCodes<T>> = rows
            .par_chunks(ENCODE_CHUNK * self.d)
            .map(|chunk| {
                let m = chunk.len() / self.d;
                let mut pre = Vec::new();
                let mut scratch = Vec::new();
                let mut codes = SparseCodes::new(self.s);
                self.pre_activations(chunk, m, &mut pre);
                for r in pre.chunks_exact(self.s) {
                    self.activate(r, &mut scratch, &mut codes);
                }
                codes
            })
            .collect();
        let mut all = SparseCodes::new(self.s);
        for p in parts {
            all.append(p);
        }
        all
    }
}

impl SaeModel<f32> {
    /// Dense `n × s` feature matrix for the rows of `z`.
    pub fn encode_matrix(&self, z: &Matrix) -> Result<Matrix> {
        ensure!(
            z.cols() == self.d,
            "input has {} columns, model expects {}",
            z.cols(),
            self.d
        );
        Ok(self.encode_rows(z.as_slice(), z.rows()).to_dense())
    }

    /// Dense `n × d` reconstruction of an `n × s` feature matrix.
    pub fn decode_matrix(&self, h: &Matrix) -> Result<Matrix> {
        ensure!(
            h.cols() == self.s,
            "features have {} columns, model expects {}",
            h.cols(),
            self.s
        );
        let mut out = Matrix::zeros(h.rows(), self.d);
        out.as_mut_slice()
            .par_chunks_mut(self.d)
            .zip(h.as_slice().par_chunks(self.s))
            .for_each(|(o, hr)| {
                o.copy_from_slice(&self.b_dec);
                for (j, &v) in hr.iter().enumerate() {
                    if v != 0.0 {
                        axpy(v, self.atom(j), o);
                    }
                }
            });
        Ok(out)
    }

    /// Encodes both sides of a raw pair into feature space.
    pub fn encode_pair(&self, pair: &PairedStream) -> Result<PairedStream> {
        ensure!(pair.space() == Space::Raw, "pair is already in {} space", pair.space());
        PairedStream::new(
            self.encode_matrix(pair.plain())?,
            self.encode_matrix(pair.ctx())?,
            pair.doc_ids().to_vec(),
            Space::SaeFeatures,
        )
    }
}

/// Mean over rows of `‖ẑ_i − z_i‖²`.
pub fn reconstruction_loss(z: &Matrix, zhat: &Matrix) -> Result<f64> {
    ensure!(
        z.rows() == zhat.rows() && z.cols() == zhat.cols(),
        "batch shapes differ: {}×{} vs {}×{}",
        z.rows(),
        z.cols(),
        zhat.rows(),
        zhat.cols()
    );
    ensure!(!z.is_empty(), "empty batch");
    let total: f64 = z
        .iter_rows()
        .zip(zhat.iter_rows())
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(&x, &y)| {
                    let e = f64::from(y) - f64::from(x);
                    e * e
                })
                .sum::<f64>()
        })
        .sum();
    Ok(total / z.rows() as f64)
}

/// Row-wise encode of a raw dump into a feature dump with the same segments.
pub fn encode_stream(model: &SaeModel<f32>, dump: &ActivationDump) -> Result<ActivationDump> {
    ensure!(
        dump.space() == Space::Raw,
        "stream is already in {} space",
        dump.space()
    );
    ensure!(
        dump.dim() == model.d(),
        "stream has dim {}, model expects {}",
        dump.dim(),
        model.d()
    );
    let features = model.encode_matrix(dump.data())?;
    dump.with_data(Space::SaeFeatures, features)
}

/// Mean count of non-zero entries per row.
pub fn mean_l0(features: &Matrix) -> Result<f64> {
    ensure!(!features.is_empty(), "mean_l0 of an empty matrix");
    let nz = features.as_slice().iter().filter(|v| **v != 0.0).count();
    Ok(nz as f64 / features.rows() as f64)
}

/// Writes a model file:
///
/// ```text
/// "STSM" | version u32 = 1 | d u64 | s u64 | law u32 (0 = TopK, 1 = ReLU)
///        | k u64 (0 for ReLU) | W_e (s×d) | b_e (s) | W_d (d×s) | b_d (d)
/// ```
///
/// All scalars little-endian, matrices row-major f32.
pub fn save_model(model: &SaeModel<f32>, path: impl AsRef<Path>) -> Result<()> {
    let (law_code, k) = match model.law {
        ActivationLaw::TopK { k } => (0u32, k as u64),
        ActivationLaw::Relu => (1u32, 0u64),
    };
    write_atomic(path.as_ref(), |w| {
        w.write_all(&MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        w.write_all(&(model.d as u64).to_le_bytes())?;
        w.write_all(&(model.s as u64).to_le_bytes())?;
        w.write_all(&law_code.to_le_bytes())?;
        w.write_all(&k.to_le_bytes())?;
        write_f32s(w, &model.w_enc)?;
        write_f32s(w, &model.b_enc)?;
        write_f32s(w, &model.w_dec_row_major())?;
        write_f32s(w, &model.b_dec)
    })
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SaeModel<f32>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |reason: String| Error::format(path, reason);

    let mut header = [0u8; MODEL_HEADER_LEN];
    read_exact_or(&mut r, &mut header, path, "header")?;
    if header[0..4] != MODEL_MAGIC {
        return Err(bad(format!("bad magic {:?}, expected \"STSM\"", &header[0..4])));
    }
    let version = u32_at(&header, 4);
    if version != MODEL_VERSION {
        return Err(bad(format!("unsupported model version {version}")));
    }
    let d = u64_at(&header, 8);
    let s = u64_at(&header, 16);
    if d == 0 || s == 0 || d > MAX_AXIS || s > MAX_AXIS {
        return Err(bad(format!("implausible model shape d={d}, s={s}")));
    }
    let (d, s) = (d as usize, s as usize);
    let k = u64_at(&header, 28);
    let law = match u32_at(&header, 24) {
        0 => ActivationLaw::TopK { k: k as usize },
        1 if k == 0 => ActivationLaw::Relu,
        1 => return Err(bad(format!("ReLU model with k = {k}"))),
        other => return Err(bad(format!("unknown activation law {other}"))),
    };
    let w_enc = read_f32s(&mut r, s * d, path)?;
    let b_enc = read_f32s(&mut r, s, path)?;
    let w_dec = read_f32s(&mut r, d * s, path)?;
    let b_dec = read_f32s(&mut r, d, path)?;
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => {}
        Ok(_) => return Err(bad("trailing bytes after model payload".into())),
        Err(e) => return Err(Error::io(path, e)),
    }
    SaeModel::from_decoder_matrix(d, s, law, w_enc, b_enc, &w_dec, b_dec)
        .map_err(|e| bad(e.to_string()))
}

/// Transposes a row-major `rows × cols` matrix.
pub(crate) fn transpose<T: Copy>(m: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(m.len());
    for c in 0..cols {
        out.extend((0..rows).map(|r| m[r * cols + c]));
    }
    out
}
