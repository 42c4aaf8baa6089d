//! Random permutation + substitution defense on transmitted features, and
//! the keyed scheme-selection protocol.
//!
//! Alice and Bob share secret scheme sets: permutations of the feature rows
//! `[0, h)` and substitution index sets. Per transmission Alice draws fresh
//! schemes, permutes each of a pair of feature tensors along the first axis,
//! swaps the rows selected by the substitution scheme between the two, and
//! tells Bob which schemes she used by sealing the selector indices with a
//! pre-shared key. An eavesdropper sees only shuffled, cross-contaminated
//! rows and ciphertext selectors.
//!
//! The permutation convention is: output row `i` = input row `P[i]`.

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::types::FeatureTensor;

const WIRE_VERSION: u8 = 1;
const NONCE_LEN: usize = 12;
const TAG_LEN: usize = 16;
const PAYLOAD_VALUE_PAIR: u8 = 0;
const PAYLOAD_PAIR_SELECTION: u8 = 1;

const SECRETS_MAGIC: &[u8; 4] = b"SCSS";

#[derive(Debug, Error)]
pub enum DefenseError {
    #[error("order of length {got} is not a permutation of [0, {h})")]
    NotAPermutation { h: usize, got: usize },
    #[error("substitution indices must be strictly increasing and < {h}")]
    BadSubstitution { h: usize },
    #[error("permutation length {perm} does not match feature rows {rows}")]
    LengthMismatch { perm: usize, rows: usize },
    #[error("feature shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("substitution index {index} out of range for {h} rows")]
    IndexOutOfRange { index: usize, h: usize },
    #[error("scheme set is empty")]
    EmptySchemeSet,
    #[error("scheme index {index} out of bounds for set of {len}")]
    SchemeIndexOutOfBounds { index: usize, len: usize },
    #[error("ciphertext too short or malformed")]
    MalformedCiphertext,
    #[error("unsupported sealed format version {0}")]
    UnsupportedVersion(u8),
    #[error("authentication failed: wrong key or tampered ciphertext")]
    AuthenticationFailed,
    #[error("sealed payload has unexpected type")]
    WrongPayloadType,
    #[error("secrets file io: {0}")]
    Io(#[from] std::io::Error),
    #[error("secrets file format: {0}")]
    SecretsFormat(String),
}

/// A permutation of the row indices `[0, h)`; output row `i` takes input
/// row `order[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationScheme {
    order: Vec<usize>,
}

impl PermutationScheme {
    pub fn new(order: Vec<usize>) -> Result<Self, DefenseError> {
        let h = order.len();
        let mut seen = vec![false; h];
        for &i in &order {
            if i >= h || seen[i] {
                return Err(DefenseError::NotAPermutation { h, got: order.len() });
            }
            seen[i] = true;
        }
        Ok(Self { order })
    }

    pub fn identity(h: usize) -> Self {
        Self {
            order: (0..h).collect(),
        }
    }

    pub fn random(h: usize, seed: u64) -> Self {
        let mut order: Vec<usize> = (0..h).collect();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        for i in (1..h).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        Self { order }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// The permutation mapping input rows back to their original positions.
    pub fn inverse(&self) -> Self {
        let mut inv = vec![0usize; self.order.len()];
        for (i, &p) in self.order.iter().enumerate() {
            inv[p] = i;
        }
        Self { order: inv }
    }

    /// Composition such that `permute(x, a.compose(&b)) ==
    /// permute(permute(x, a), b)`.
    pub fn compose(&self, then: &Self) -> Result<Self, DefenseError> {
        if self.len() != then.len() {
            return Err(DefenseError::LengthMismatch {
                perm: then.len(),
                rows: self.len(),
            });
        }
        Ok(Self {
            order: then.order.iter().map(|&i| self.order[i]).collect(),
        })
    }
}

/// A strictly increasing set of row indices at which two feature tensors
/// exchange rows. May be empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubstitutionScheme {
    indices: Vec<usize>,
}

impl SubstitutionScheme {
    pub fn new(indices: Vec<usize>, h: usize) -> Result<Self, DefenseError> {
        for w in indices.windows(2) {
            if w[0] >= w[1] {
                return Err(DefenseError::BadSubstitution { h });
            }
        }
        if let Some(&last) = indices.last() {
            if last >= h {
                return Err(DefenseError::BadSubstitution { h });
            }
        }
        Ok(Self { indices })
    }

    pub fn empty() -> Self {
        Self { indices: Vec::new() }
    }

    /// Each index included independently with probability 1/2.
    pub fn random(h: usize, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let indices = (0..h).filter(|_| rng.gen::<bool>()).collect();
        Self { indices }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// The secret scheme sets shared by Alice and Bob.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemeSets {
    permutations: Vec<PermutationScheme>,
    substitutions: Vec<SubstitutionScheme>,
}

impl SchemeSets {
    pub fn new(
        permutations: Vec<PermutationScheme>,
        substitutions: Vec<SubstitutionScheme>,
    ) -> Result<Self, DefenseError> {
        if permutations.is_empty() || substitutions.is_empty() {
            return Err(DefenseError::EmptySchemeSet);
        }
        Ok(Self {
            permutations,
            substitutions,
        })
    }

    /// Generates `n_perm` random permutations and `n_subst` random
    /// substitution schemes over `h` rows.
    pub fn generate(h: usize, n_perm: usize, n_subst: usize, seed: u64) -> Result<Self, DefenseError> {
        if n_perm == 0 || n_subst == 0 {
            return Err(DefenseError::EmptySchemeSet);
        }
        let permutations = (0..n_perm)
            .map(|i| PermutationScheme::random(h, crate::seed::derive_seed(seed, &[0x70, i as u64])))
            .collect();
        let substitutions = (0..n_subst)
            .map(|i| SubstitutionScheme::random(h, crate::seed::derive_seed(seed, &[0x71, i as u64])))
            .collect();
        Ok(Self {
            permutations,
            substitutions,
        })
    }

    pub fn permutations(&self) -> &[PermutationScheme] {
        &self.permutations
    }

    pub fn substitutions(&self) -> &[SubstitutionScheme] {
        &self.substitutions
    }

    /// Writes schemes and key to a binary secrets file. Keep it out of any
    /// published results directory.
    pub fn save_with_key(&self, key: &SharedKey, path: &std::path::Path) -> Result<(), DefenseError> {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(SECRETS_MAGIC)?;
        w.write_all(&[WIRE_VERSION])?;
        w.write_all(&key.bytes)?;
        w.write_all(&(self.permutations.len() as u32).to_le_bytes())?;
        w.write_all(&(self.substitutions.len() as u32).to_le_bytes())?;
        for p in &self.permutations {
            w.write_all(&(p.len() as u32).to_le_bytes())?;
            for &i in p.order() {
                w.write_all(&(i as u32).to_le_bytes())?;
            }
        }
        for s in &self.substitutions {
            w.write_all(&(s.len() as u32).to_le_bytes())?;
            for &i in s.indices() {
                w.write_all(&(i as u32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a secrets file written by [`SchemeSets::save_with_key`].
    pub fn load_with_key(path: &std::path::Path) -> Result<(Self, SharedKey), DefenseError> {
        use std::io::Read;
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != SECRETS_MAGIC {
            return Err(DefenseError::SecretsFormat("bad magic".into()));
        }
        let mut ver = [0u8; 1];
        r.read_exact(&mut ver)?;
        if ver[0] != WIRE_VERSION {
            return Err(DefenseError::SecretsFormat(format!("version {}", ver[0])));
        }
        let mut key = [0u8; 32];
        r.read_exact(&mut key)?;
        let read_u32 = |r: &mut dyn Read| -> Result<u32, DefenseError> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        };
        let np = read_u32(&mut r)? as usize;
        let ns = read_u32(&mut r)? as usize;
        let mut permutations = Vec::with_capacity(np);
        for _ in 0..np {
            let len = read_u32(&mut r)? as usize;
            let mut order = Vec::with_capacity(len);
            for _ in 0..len {
                order.push(read_u32(&mut r)? as usize);
            }
            permutations.push(
                PermutationScheme::new(order)
                    .map_err(|e| DefenseError::SecretsFormat(e.to_string()))?,
            );
        }
        let mut substitutions = Vec::with_capacity(ns);
        for _ in 0..ns {
            let len = read_u32(&mut r)? as usize;
            let mut idx = Vec::with_capacity(len);
            for _ in 0..len {
                idx.push(read_u32(&mut r)? as usize);
            }
            // h is not recorded per scheme; validate monotonicity only
            let h = idx.last().map(|&l| l + 1).unwrap_or(0);
            substitutions.push(
                SubstitutionScheme::new(idx, h.max(1))
                    .map_err(|e| DefenseError::SecretsFormat(e.to_string()))?,
            );
        }
        Ok((
            Self::new(permutations, substitutions)?,
            SharedKey::from_bytes(key),
        ))
    }
}

/// Indices selecting one permutation and one substitution scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValuePair {
    pub p: usize,
    pub s: usize,
}

/// Selector for a protected pair: one permutation per tensor plus the shared
/// substitution scheme, sealed as a single message.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairSelection {
    pub p_a: usize,
    pub p_b: usize,
    pub s: usize,
}

/// Pre-shared 256-bit key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharedKey {
    bytes: [u8; 32],
}

impl SharedKey {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self { bytes }
    }

    /// Derives a key deterministically from a seed (for reproducible runs).
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut bytes = [0u8; 32];
        rng.fill(&mut bytes);
        Self { bytes }
    }

    pub fn bytes(&self) -> &[u8; 32] {
        &self.bytes
    }
}

/// An encrypted, integrity-protected scheme selector:
/// `[1-byte version][12-byte nonce][ciphertext || 16-byte tag]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedValuePair {
    bytes: Vec<u8>,
}

impl SealedValuePair {
    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Self { bytes }
    }
}

/// Permutes feature rows: output row `i` = input row `P[i]`.
pub fn permute(y_f: &FeatureTensor, p: &PermutationScheme) -> Result<FeatureTensor, DefenseError> {
    let (h, w, c) = y_f.shape();
    if p.len() != h {
        return Err(DefenseError::LengthMismatch { perm: p.len(), rows: h });
    }
    let mut out = Array3::<f64>::zeros((h, w, c));
    for (i, &src) in p.order().iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i)
            .assign(&y_f.values().index_axis(ndarray::Axis(0), src));
    }
    Ok(FeatureTensor::new(out))
}

/// Exact inverse of [`permute`].
pub fn inverse_permute(y_p: &FeatureTensor, p: &PermutationScheme) -> Result<FeatureTensor, DefenseError> {
    let (h, w, c) = y_p.shape();
    if p.len() != h {
        return Err(DefenseError::LengthMismatch { perm: p.len(), rows: h });
    }
    let mut out = Array3::<f64>::zeros((h, w, c));
    for (i, &src) in p.order().iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), src)
            .assign(&y_p.values().index_axis(ndarray::Axis(0), i));
    }
    Ok(FeatureTensor::new(out))
}

/// Swaps the rows selected by `s` between two equal-shape tensors.
/// Self-inverse: applying it twice restores both inputs.
pub fn substitute_pair(
    a: &FeatureTensor,
    b: &FeatureTensor,
    s: &SubstitutionScheme,
) -> Result<(FeatureTensor, FeatureTensor), DefenseError> {
    if a.shape() != b.shape() {
        return Err(DefenseError::ShapeMismatch(a.shape(), b.shape()));
    }
    let h = a.shape().0;
    let mut a_out = a.clone();
    let mut b_out = b.clone();
    for &i in s.indices() {
        if i >= h {
            return Err(DefenseError::IndexOutOfRange { index: i, h });
        }
        let row_a = a.values().index_axis(ndarray::Axis(0), i).to_owned();
        let row_b = b.values().index_axis(ndarray::Axis(0), i).to_owned();
        a_out
            .values_mut()
            .index_axis_mut(ndarray::Axis(0), i)
            .assign(&row_b);
        b_out
            .values_mut()
            .index_axis_mut(ndarray::Axis(0), i)
            .assign(&row_a);
    }
    Ok((a_out, b_out))
}

/// Full defense transform on a pair: permute each tensor with its own
/// scheme, then swap the substitution rows between them. Both outputs are
/// transmitted.
pub fn protect_pair(
    a: &FeatureTensor,
    b: &FeatureTensor,
    p_a: &PermutationScheme,
    p_b: &PermutationScheme,
    s: &SubstitutionScheme,
) -> Result<(FeatureTensor, FeatureTensor), DefenseError> {
    let pa = permute(a, p_a)?;
    let pb = permute(b, p_b)?;
    substitute_pair(&pa, &pb, s)
}

/// Exact inverse of [`protect_pair`]: un-substitute, then inverse-permute
/// each tensor.
pub fn recover_pair(
    a_s: &FeatureTensor,
    b_s: &FeatureTensor,
    p_a: &PermutationScheme,
    p_b: &PermutationScheme,
    s: &SubstitutionScheme,
) -> Result<(FeatureTensor, FeatureTensor), DefenseError> {
    let (pa, pb) = substitute_pair(a_s, b_s, s)?;
    Ok((inverse_permute(&pa, p_a)?, inverse_permute(&pb, p_b)?))
}

/// A random-noise partner tensor for an unpaired final frame: i.i.d.
/// standard Gaussian entries matching the marginal scale of normalized
/// features.
pub fn noise_features(shape: (usize, usize, usize), rng_seed: u64) -> FeatureTensor {
    let mut rng = ChaCha20Rng::seed_from_u64(rng_seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    FeatureTensor::new(Array3::from_shape_fn(shape, |_| normal.sample(&mut rng)))
}

/// Uniform independent draw of one permutation and one substitution scheme.
pub fn select_schemes<'a>(
    sets: &'a SchemeSets,
    rng_seed: u64,
) -> Result<(ValuePair, &'a PermutationScheme, &'a SubstitutionScheme), DefenseError> {
    if sets.permutations.is_empty() || sets.substitutions.is_empty() {
        return Err(DefenseError::EmptySchemeSet);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(rng_seed);
    let p = rng.gen_range(0..sets.permutations.len());
    let s = rng.gen_range(0..sets.substitutions.len());
    Ok((ValuePair { p, s }, &sets.permutations[p], &sets.substitutions[s]))
}

/// Scheme draw for a protected pair: independent permutations for the two
/// tensors plus one shared substitution scheme.
pub fn select_pair_schemes<'a>(
    sets: &'a SchemeSets,
    rng_seed: u64,
) -> Result<
    (
        PairSelection,
        &'a PermutationScheme,
        &'a PermutationScheme,
        &'a SubstitutionScheme,
    ),
    DefenseError,
> {
    if sets.permutations.is_empty() || sets.substitutions.is_empty() {
        return Err(DefenseError::EmptySchemeSet);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(rng_seed);
    let p_a = rng.gen_range(0..sets.permutations.len());
    let p_b = rng.gen_range(0..sets.permutations.len());
    let s = rng.gen_range(0..sets.substitutions.len());
    Ok((
        PairSelection { p_a, p_b, s },
        &sets.permutations[p_a],
        &sets.permutations[p_b],
        &sets.substitutions[s],
    ))
}

fn seal_bytes(
    plaintext: &[u8],
    payload_type: u8,
    key: &SharedKey,
    rng_seed: u64,
) -> SealedValuePair {
    let cipher = ChaCha20Poly1305::new(Key::from_slice(key.bytes()));
    let mut rng = ChaCha20Rng::seed_from_u64(rng_seed);
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill(&mut nonce);
    let aad = [WIRE_VERSION, payload_type];
    let ct = cipher
        .encrypt(
            Nonce::from_slice(&nonce),
            Payload {
                msg: plaintext,
                aad: &aad,
            },
        )
        .expect("encryption is infallible for small payloads");
    let mut bytes = Vec::with_capacity(1 + NONCE_LEN + ct.len());
    bytes.push(WIRE_VERSION);
    bytes.extend_from_slice(&nonce);
    bytes.extend_from_slice(&ct);
    SealedValuePair { bytes }
}

fn open_bytes(
    sealed: &SealedValuePair,
    payload_type: u8,
    key: &SharedKey,
) -> Result<Vec<u8>, DefenseError> {
    let b = &sealed.bytes;
    if b.len() < 1 + NONCE_LEN + TAG_LEN {
        return Err(DefenseError::MalformedCiphertext);
    }
    if b[0] != WIRE_VERSION {
        return Err(DefenseError::UnsupportedVersion(b[0]));
    }
    let nonce = &b[1..1 + NONCE_LEN];
    let ct = &b[1 + NONCE_LEN..];
    let cipher = ChaCha20Poly1305::new(Key::from_slice(key.bytes()));
    let aad = [WIRE_VERSION, payload_type];
    cipher
        .decrypt(Nonce::from_slice(nonce), Payload { msg: ct, aad: &aad })
        .map_err(|_| DefenseError::AuthenticationFailed)
}

/// Seals a scheme selector under the shared key. Randomized: sealing the
/// same value twice yields different ciphertexts.
pub fn seal_value_pair(v: &ValuePair, key: &SharedKey, rng_seed: u64) -> SealedValuePair {
    let mut pt = [0u8; 4];
    pt[0..2].copy_from_slice(&(v.p as u16).to_le_bytes());
    pt[2..4].copy_from_slice(&(v.s as u16).to_le_bytes());
    seal_bytes(&pt, PAYLOAD_VALUE_PAIR, key, rng_seed)
}

/// Opens a sealed selector; fails on a wrong key, tampering or truncation,
/// never returning a silently wrong value.
pub fn open_value_pair(sealed: &SealedValuePair, key: &SharedKey) -> Result<ValuePair, DefenseError> {
    let pt = open_bytes(sealed, PAYLOAD_VALUE_PAIR, key)?;
    if pt.len() != 4 {
        return Err(DefenseError::WrongPayloadType);
    }
    Ok(ValuePair {
        p: u16::from_le_bytes([pt[0], pt[1]]) as usize,
        s: u16::from_le_bytes([pt[2], pt[3]]) as usize,
    })
}

/// Seals a pair selector (two permutation indices plus the substitution
/// index) as one message.
pub fn seal_pair_selection(v: &PairSelection, key: &SharedKey, rng_seed: u64) -> SealedValuePair {
    let mut pt = [0u8; 6];
    pt[0..2].copy_from_slice(&(v.p_a as u16).to_le_bytes());
    pt[2..4].copy_from_slice(&(v.p_b as u16).to_le_bytes());
    pt[4..6].copy_from_slice(&(v.s as u16).to_le_bytes());
    seal_bytes(&pt, PAYLOAD_PAIR_SELECTION, key, rng_seed)
}

/// Opens a sealed pair selector.
pub fn open_pair_selection(
    sealed: &SealedValuePair,
    key: &SharedKey,
) -> Result<PairSelection, DefenseError> {
    let pt = open_bytes(sealed, PAYLOAD_PAIR_SELECTION, key)?;
    if pt.len() != 6 {
        return Err(DefenseError::WrongPayloadType);
    }
    Ok(PairSelection {
        p_a: u16::from_le_bytes([pt[0], pt[1]]) as usize,
        p_b: u16::from_le_bytes([pt[2], pt[3]]) as usize,
        s: u16::from_le_bytes([pt[4], pt[5]]) as usize,
    })
}

/// Looks up the schemes named by an opened selection, bounds-checked.
pub fn resolve_pair_selection<'a>(
    sets: &'a SchemeSets,
    sel: &PairSelection,
) -> Result<
    (
        &'a PermutationScheme,
        &'a PermutationScheme,
        &'a SubstitutionScheme,
    ),
    DefenseError,
> {
    let get_p = |i: usize| {
        sets.permutations.get(i).ok_or(DefenseError::SchemeIndexOutOfBounds {
            index: i,
            len: sets.permutations.len(),
        })
    };
    let s = sets
        .substitutions
        .get(sel.s)
        .ok_or(DefenseError::SchemeIndexOutOfBounds {
            index: sel.s,
            len: sets.substitutions.len(),
        })?;
    Ok((get_p(sel.p_a)?, get_p(sel.p_b)?, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    /// Rows carrying a recognizable constant value each, h x 1 x 1.
    fn row_tensor(values: &[f64]) -> FeatureTensor {
        let h = values.len();
        let mut arr = Array3::<f64>::zeros((h, 1, 1));
        for (i, &v) in values.iter().enumerate() {
            arr[(i, 0, 0)] = v;
        }
        FeatureTensor::new(arr)
    }

    fn rows(t: &FeatureTensor) -> Vec<f64> {
        (0..t.shape().0).map(|i| t.values()[(i, 0, 0)]).collect()
    }

    fn random_features(shape: (usize, usize, usize), seed: u64) -> FeatureTensor {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        FeatureTensor::new(Array3::from_shape_fn(shape, |_| rng.gen::<f64>() - 0.5))
    }

    #[test]
    fn permutation_validation() {
        assert!(PermutationScheme::new(vec![4, 2, 1, 0, 3]).is_ok());
        assert!(PermutationScheme::new(vec![0, 0, 1]).is_err());
        assert!(PermutationScheme::new(vec![0, 3]).is_err());
    }

    #[test]
    fn substitution_validation() {
        assert!(SubstitutionScheme::new(vec![0, 2], 5).is_ok());
        assert!(SubstitutionScheme::new(vec![], 5).is_ok());
        assert!(SubstitutionScheme::new(vec![2, 0], 5).is_err());
        assert!(SubstitutionScheme::new(vec![0, 5], 5).is_err());
    }

    #[test]
    fn permute_matches_worked_example() {
        // h=5, P=[4,2,1,0,3] on rows [y0..y4] -> [y4, y2, y1, y0, y3]
        let y = row_tensor(&[0.0, 1.0, 2.0, 3.0, 4.0]);
        let p = PermutationScheme::new(vec![4, 2, 1, 0, 3]).unwrap();
        let yp = permute(&y, &p).unwrap();
        assert_eq!(rows(&yp), vec![4.0, 2.0, 1.0, 0.0, 3.0]);
        let back = inverse_permute(&yp, &p).unwrap();
        assert_eq!(rows(&back), vec![0.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn identity_permutation_is_noop() {
        let y = random_features((6, 3, 2), 1);
        let p = PermutationScheme::identity(6);
        assert_eq!(permute(&y, &p).unwrap().values(), y.values());
        assert_eq!(inverse_permute(&y, &p).unwrap().values(), y.values());
    }

    #[test]
    fn permute_length_mismatch_errors() {
        let y = random_features((6, 3, 2), 2);
        let p = PermutationScheme::identity(5);
        assert!(matches!(
            permute(&y, &p),
            Err(DefenseError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn permute_inverse_round_trip_many() {
        for t in 0..1000u64 {
            let h = 2 + (t % 14) as usize;
            let y = random_features((h, 2, 1), 1000 + t);
            let p = PermutationScheme::random(h, 2000 + t);
            let yp = permute(&y, &p).unwrap();
            let back = inverse_permute(&yp, &p).unwrap();
            assert_eq!(back.values(), y.values());
        }
    }

    #[test]
    fn permutation_composition_convention() {
        for t in 0..50u64 {
            let h = 8;
            let y = random_features((h, 2, 1), 3000 + t);
            let p1 = PermutationScheme::random(h, 4000 + t);
            let p2 = PermutationScheme::random(h, 5000 + t);
            let lhs = permute(&permute(&y, &p1).unwrap(), &p2).unwrap();
            let composed = p1.compose(&p2).unwrap();
            let rhs = permute(&y, &composed).unwrap();
            assert_eq!(lhs.values(), rhs.values());
        }
    }

    #[test]
    fn substitution_worked_example() {
        // a=[y4,y2,y1,y0,y3], b=[y'0,y'3,y'4,y'1,y'2], S=[0,2]
        // -> a'=[y'0,y2,y'4,y0,y3], b'=[y4,y'3,y1,y'1,y'2]
        let a = row_tensor(&[4.0, 2.0, 1.0, 0.0, 3.0]);
        let b = row_tensor(&[10.0, 13.0, 14.0, 11.0, 12.0]);
        let s = SubstitutionScheme::new(vec![0, 2], 5).unwrap();
        let (a2, b2) = substitute_pair(&a, &b, &s).unwrap();
        assert_eq!(rows(&a2), vec![10.0, 2.0, 14.0, 0.0, 3.0]);
        assert_eq!(rows(&b2), vec![4.0, 13.0, 1.0, 11.0, 12.0]);
    }

    #[test]
    fn substitution_empty_and_self_inverse() {
        let a = random_features((7, 2, 2), 10);
        let b = random_features((7, 2, 2), 11);
        let empty = SubstitutionScheme::empty();
        let (a2, b2) = substitute_pair(&a, &b, &empty).unwrap();
        assert_eq!(a2.values(), a.values());
        assert_eq!(b2.values(), b.values());

        for t in 0..1000u64 {
            let s = SubstitutionScheme::random(7, 6000 + t);
            let (a2, b2) = substitute_pair(&a, &b, &s).unwrap();
            let (a3, b3) = substitute_pair(&a2, &b2, &s).unwrap();
            assert_eq!(a3.values(), a.values());
            assert_eq!(b3.values(), b.values());
        }
    }

    #[test]
    fn substitution_shape_mismatch_errors() {
        let a = random_features((7, 2, 2), 12);
        let b = random_features((7, 2, 3), 13);
        let s = SubstitutionScheme::new(vec![1], 7).unwrap();
        assert!(matches!(
            substitute_pair(&a, &b, &s),
            Err(DefenseError::ShapeMismatch(..))
        ));
    }

    #[test]
    fn full_walkthrough_protect_and_recover() {
        // Pa=[4,2,1,0,3], Pb=[0,3,4,1,2], S=[0,2]:
        // y^s = [y'0, y2, y'4, y0, y3], y'^s = [y4, y'3, y1, y'1, y'2]
        let a = row_tensor(&[0.0, 1.0, 2.0, 3.0, 4.0]);
        let b = row_tensor(&[10.0, 11.0, 12.0, 13.0, 14.0]);
        let pa = PermutationScheme::new(vec![4, 2, 1, 0, 3]).unwrap();
        let pb = PermutationScheme::new(vec![0, 3, 4, 1, 2]).unwrap();
        let s = SubstitutionScheme::new(vec![0, 2], 5).unwrap();
        let (a_s, b_s) = protect_pair(&a, &b, &pa, &pb, &s).unwrap();
        assert_eq!(rows(&a_s), vec![10.0, 2.0, 14.0, 0.0, 3.0]);
        assert_eq!(rows(&b_s), vec![4.0, 13.0, 1.0, 11.0, 12.0]);
        let (a_r, b_r) = recover_pair(&a_s, &b_s, &pa, &pb, &s).unwrap();
        assert_eq!(rows(&a_r), rows(&a));
        assert_eq!(rows(&b_r), rows(&b));
    }

    #[test]
    fn identity_schemes_are_transparent() {
        let a = random_features((5, 3, 2), 20);
        let b = random_features((5, 3, 2), 21);
        let pid = PermutationScheme::identity(5);
        let s = SubstitutionScheme::empty();
        let (a2, b2) = protect_pair(&a, &b, &pid, &pid, &s).unwrap();
        assert_eq!(a2.values(), a.values());
        assert_eq!(b2.values(), b.values());
    }

    #[test]
    fn protect_recover_round_trip_many() {
        for t in 0..1000u64 {
            let h = 4 + (t % 12) as usize;
            let a = random_features((h, 2, 2), 7000 + t);
            let b = random_features((h, 2, 2), 8000 + t);
            let pa = PermutationScheme::random(h, 9000 + t);
            let pb = PermutationScheme::random(h, 10000 + t);
            let s = SubstitutionScheme::random(h, 11000 + t);
            let (a_s, b_s) = protect_pair(&a, &b, &pa, &pb, &s).unwrap();
            let (a_r, b_r) = recover_pair(&a_s, &b_s, &pa, &pb, &s).unwrap();
            assert_eq!(a_r.values(), a.values());
            assert_eq!(b_r.values(), b.values());
        }
    }

    #[test]
    fn noise_features_reproducible_and_distinct() {
        let a = noise_features((4, 3, 2), 1);
        let b = noise_features((4, 3, 2), 1);
        let c = noise_features((4, 3, 2), 2);
        assert_eq!(a.values(), b.values());
        assert_ne!(a.values(), c.values());
        assert_eq!(a.shape(), (4, 3, 2));
    }

    #[test]
    fn select_schemes_singleton_and_deterministic() {
        let sets = SchemeSets::generate(8, 1, 1, 5).unwrap();
        let (v, _, _) = select_schemes(&sets, 42).unwrap();
        assert_eq!((v.p, v.s), (0, 0));

        let sets = SchemeSets::generate(8, 16, 16, 6).unwrap();
        let (v1, _, _) = select_schemes(&sets, 7).unwrap();
        let (v2, _, _) = select_schemes(&sets, 7).unwrap();
        assert_eq!(v1, v2);
    }

    #[test]
    fn select_schemes_chi_square_uniform() {
        // 10^5 draws over |P| = 8: chi-square over p at significance 0.01
        // (critical value 18.475 at 7 degrees of freedom)
        let sets = SchemeSets::generate(8, 8, 4, 9).unwrap();
        let mut counts = [0usize; 8];
        let draws = 100_000;
        for i in 0..draws {
            let (v, _, _) = select_schemes(&sets, crate::seed::derive_seed(99, &[i])).unwrap();
            counts[v.p] += 1;
        }
        let expected = draws as f64 / 8.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 18.475, "chi-square {chi2} exceeds the 0.01 critical value");
    }

    #[test]
    fn scheme_draw_serial_independence() {
        // lag-1 correlation of the flattened (p, s) stream over 10^4 draws
        let sets = SchemeSets::generate(8, 16, 16, 10).unwrap();
        let t = 10_000;
        let mut u = Vec::with_capacity(t);
        for i in 0..t {
            let (v, _, _) = select_schemes(&sets, crate::seed::derive_seed(123, &[i as u64])).unwrap();
            u.push((v.p * 16 + v.s) as f64 / 255.0);
        }
        let mean: f64 = u.iter().sum::<f64>() / t as f64;
        let var: f64 = u.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / t as f64;
        let mut cov = 0.0;
        for i in 0..t - 1 {
            cov += (u[i] - mean) * (u[i + 1] - mean);
        }
        cov /= (t - 1) as f64;
        let r = cov / var;
        assert!(r.abs() < 4.0 / (t as f64).sqrt(), "lag-1 correlation {r}");
    }

    #[test]
    fn seal_open_round_trip_grid() {
        let key = SharedKey::from_seed(1);
        for p in 0..16 {
            for s in 0..16 {
                let v = ValuePair { p, s };
                let sealed = seal_value_pair(&v, &key, (p * 16 + s) as u64);
                let opened = open_value_pair(&sealed, &key).unwrap();
                assert_eq!(opened, v);
            }
        }
    }

    #[test]
    fn sealing_is_randomized() {
        let key = SharedKey::from_seed(2);
        let v = ValuePair { p: 3, s: 7 };
        let a = seal_value_pair(&v, &key, 1);
        let b = seal_value_pair(&v, &key, 2);
        assert_ne!(a.as_bytes(), b.as_bytes());
    }

    #[test]
    fn tampering_detected() {
        let key = SharedKey::from_seed(3);
        let v = ValuePair { p: 5, s: 9 };
        let sealed = seal_value_pair(&v, &key, 10);
        for bit in 0..8 {
            for pos in 1..sealed.as_bytes().len() {
                let mut bytes = sealed.as_bytes().to_vec();
                bytes[pos] ^= 1 << bit;
                let tampered = SealedValuePair::from_bytes(bytes);
                assert!(matches!(
                    open_value_pair(&tampered, &key),
                    Err(DefenseError::AuthenticationFailed)
                ));
            }
        }
    }

    #[test]
    fn wrong_key_never_silently_wrong() {
        let key = SharedKey::from_seed(4);
        for trial in 0..1000u64 {
            let v = ValuePair {
                p: (trial % 16) as usize,
                s: (trial / 16 % 16) as usize,
            };
            let sealed = seal_value_pair(&v, &key, trial);
            let wrong = SharedKey::from_seed(5 + trial);
            assert!(matches!(
                open_value_pair(&sealed, &wrong),
                Err(DefenseError::AuthenticationFailed)
            ));
        }
    }

    #[test]
    fn truncated_ciphertext_is_malformed() {
        let key = SharedKey::from_seed(6);
        let sealed = seal_value_pair(&ValuePair { p: 0, s: 0 }, &key, 0);
        let truncated = SealedValuePair::from_bytes(sealed.as_bytes()[..10].to_vec());
        assert!(matches!(
            open_value_pair(&truncated, &key),
            Err(DefenseError::MalformedCiphertext)
        ));
    }

    #[test]
    fn pair_selection_seal_round_trip() {
        let key = SharedKey::from_seed(7);
        let sel = PairSelection { p_a: 3, p_b: 200, s: 17 };
        let sealed = seal_pair_selection(&sel, &key, 1);
        assert_eq!(open_pair_selection(&sealed, &key).unwrap(), sel);
        // a value-pair message must not open as a pair selection
        let vp = seal_value_pair(&ValuePair { p: 1, s: 2 }, &key, 2);
        assert!(open_pair_selection(&vp, &key).is_err());
    }

    #[test]
    fn candidate_space_exceeds_2_pow_59() {
        // 16! * 2^16 candidate (P, S) pairs at h = 16
        let fact16: u128 = (1..=16u128).product();
        let count = fact16 * (1u128 << 16);
        assert!(count > 1u128 << 59, "count {count}");
    }

    #[test]
    fn secrets_file_round_trip() {
        let sets = SchemeSets::generate(16, 8, 8, 11).unwrap();
        let key = SharedKey::from_seed(12);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("secrets.bin");
        sets.save_with_key(&key, &path).unwrap();
        let (loaded, loaded_key) = SchemeSets::load_with_key(&path).unwrap();
        assert_eq!(loaded, sets);
        assert_eq!(loaded_key, key);
    }
}
