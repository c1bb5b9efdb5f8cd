//! Binary extension fields, polynomial hash families and a rounded
//! matrix-product PRF at toy sizes.
//!
//! Every random choice made anywhere in the crate is drawn from
//! [`rng_for`], a ChaCha stream keyed by a root seed and a path of
//! integers, so results depend only on `(seed, path)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Low part of the modulus for each degree; the full polynomial is
/// `x^s + IRREDUCIBLE_LOW[s]`. See docs/field-moduli.md.
#[rustfmt::skip]
pub(crate) const IRREDUCIBLE_LOW: [u64; 65] = [
    0,
    0x1, // s=1
    0x3, // s=2
    0x3, // s=3
    0x3, // s=4
    0x5, // s=5
    0x1b, // s=6
    0x3, // s=7
    0x1d, // s=8
    0x11, // s=9
    0x6f, // s=10
    0x5, // s=11
    0xeb, // s=12
    0x1b, // s=13
    0xa9, // s=14
    0x35, // s=15
    0x2d, // s=16
    0x9, // s=17
    0x1403, // s=18
    0x27, // s=19
    0x6f3, // s=20
    0x65, // s=21
    0x1f61, // s=22
    0x21, // s=23
    0x1e6a9, // s=24
    0x145, // s=25
    0x45d3, // s=26
    0x16ad, // s=27
    0x20e5, // s=28
    0x5, // s=29
    0x328af, // s=30
    0x9, // s=31
    0x8299, // s=32
    0x3d49, // s=33
    0x199f7, // s=34
    0xca5, // s=35
    0xda6163, // s=36
    0x3f, // s=37
    0x4727, // s=38
    0x9ee5, // s=39
    0xa5b12b, // s=40
    0x9, // s=41
    0x47141a67, // s=42
    0x59, // s=43
    0x10b001b, // s=44
    0x12d841, // s=45
    0xb24001, // s=46
    0x21, // s=47
    0x2821d89, // s=48
    0x55f, // s=49
    0x380b7755, // s=50
    0x19241, // s=51
    0x1ea2c493, // s=52
    0x47, // s=53
    0x5ea27a097, // s=54
    0xe91, // s=55
    0x244486b1d, // s=56
    0x292d7f, // s=57
    0xa7451deb, // s=58
    0x7b, // s=59
    0x3697464a113d, // s=60
    0x27, // s=61
    0x17f3f7043, // s=62
    0x1c38b1f, // s=63
    0x247f43cb7, // s=64
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FieldError {
    #[error("field degree mismatch: {0} vs {1}")]
    DegreeMismatch(u32, u32),
    #[error("field degree {0} outside 1..=64")]
    BadDegree(u32),
    #[error("value {bits:#x} does not fit in {s} bits")]
    OutOfRange { bits: u64, s: u32 },
    #[error("t = {t} must be below 2^{s}")]
    TooManyCoefficients { t: usize, s: u32 },
    #[error("out_bits {out_bits} outside 1..={s}")]
    BadOutBits { out_bits: u32, s: u32 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("bad modulus: need 2 <= p < q (p={p}, q={q})")]
    BadModulus { p: u64, q: u64 },
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a root seed and a path.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    let mut h = mix64(seed);
    for &p in path {
        h = mix64(h ^ mix64(p.wrapping_add(0x6A09_E667_F3BC_C909)));
    }
    h
}

/// Deterministic stream for `(seed, path)`.
pub fn rng_for(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

fn mask(s: u32) -> u64 {
    if s >= 64 {
        u64::MAX
    } else {
        (1u64 << s) - 1
    }
}

fn check_degree(s: u32) -> Result<(), FieldError> {
    if (1..=64).contains(&s) {
        Ok(())
    } else {
        Err(FieldError::BadDegree(s))
    }
}

/// Element of GF(2^s).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FieldElement {
    bits: u64,
    s: u32,
}

impl FieldElement {
    pub fn new(bits: u64, s: u32) -> Result<Self, FieldError> {
        check_degree(s)?;
        if bits & !mask(s) != 0 {
            return Err(FieldError::OutOfRange { bits, s });
        }
        Ok(FieldElement { bits, s })
    }

    pub fn zero(s: u32) -> Result<Self, FieldError> {
        Self::new(0, s)
    }

    pub fn one(s: u32) -> Result<Self, FieldError> {
        Self::new(1, s)
    }

    pub fn bits(&self) -> u64 {
        self.bits
    }

    pub fn degree(&self) -> u32 {
        self.s
    }

    pub fn add(self, other: FieldElement) -> Result<FieldElement, FieldError> {
        if self.s != other.s {
            return Err(FieldError::DegreeMismatch(self.s, other.s));
        }
        Ok(FieldElement {
            bits: self.bits ^ other.bits,
            s: self.s,
        })
    }

    pub fn mul(self, other: FieldElement) -> Result<FieldElement, FieldError> {
        gf_mul(self, other)
    }

    pub fn pow(self, mut e: u128) -> FieldElement {
        let mut base = self;
        let mut acc = FieldElement { bits: 1, s: self.s };
        while e > 0 {
            if e & 1 == 1 {
                acc = FieldElement {
                    bits: mul_raw(acc.bits, base.bits, self.s),
                    s: self.s,
                };
            }
            base = FieldElement {
                bits: mul_raw(base.bits, base.bits, self.s),
                s: self.s,
            };
            e >>= 1;
        }
        acc
    }

    /// Multiplicative inverse; `None` for zero.
    pub fn inverse(self) -> Option<FieldElement> {
        if self.bits == 0 {
            return None;
        }
        // a^(2^s - 2)
        let order = (1u128 << self.s) - 1;
        Some(self.pow(order - 1))
    }
}

fn clmul(a: u64, b: u64) -> u128 {
    let mut acc = 0u128;
    let a = a as u128;
    let mut b = b;
    let mut i = 0;
    while b != 0 {
        if b & 1 == 1 {
            acc ^= a << i;
        }
        b >>= 1;
        i += 1;
    }
    acc
}

fn mul_raw(a: u64, b: u64, s: u32) -> u64 {
    let mut prod = clmul(a, b);
    let modulus = (1u128 << s) | IRREDUCIBLE_LOW[s as usize] as u128;
    let mut top = 127 - prod.leading_zeros() as i64;
    while prod != 0 && top >= s as i64 {
        prod ^= modulus << (top as u32 - s);
        top = 127 - prod.leading_zeros() as i64;
    }
    prod as u64
}

/// Carry-less product reduced by the fixed modulus for `s`.
pub fn gf_mul(a: FieldElement, b: FieldElement) -> Result<FieldElement, FieldError> {
    if a.s != b.s {
        return Err(FieldError::DegreeMismatch(a.s, b.s));
    }
    Ok(FieldElement {
        bits: mul_raw(a.bits, b.bits, a.s),
        s: a.s,
    })
}

/// `f(x) = sum a_i x^i` over GF(2^s), read out as the low `out_bits` bits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolyFn {
    coeffs: Vec<FieldElement>,
    s: u32,
    out_bits: u32,
}

impl PolyFn {
    pub fn new(coeffs: Vec<FieldElement>, out_bits: u32) -> Result<Self, FieldError> {
        let s = match coeffs.first() {
            Some(c) => c.s,
            None => return Err(FieldError::Dimension("PolyFn needs at least one coefficient".into())),
        };
        if let Some(c) = coeffs.iter().find(|c| c.s != s) {
            return Err(FieldError::DegreeMismatch(s, c.s));
        }
        if out_bits == 0 || out_bits > s {
            return Err(FieldError::BadOutBits { out_bits, s });
        }
        Ok(PolyFn { coeffs, s, out_bits })
    }

    pub fn coeffs(&self) -> &[FieldElement] {
        &self.coeffs
    }

    pub fn degree(&self) -> u32 {
        self.s
    }

    pub fn out_bits(&self) -> u32 {
        self.out_bits
    }

    /// Independence level (number of coefficients).
    pub fn t(&self) -> usize {
        self.coeffs.len()
    }

    /// Evaluate on a raw `s`-bit input. Panics if `x` is out of range.
    pub fn eval_bits(&self, x: u64) -> u64 {
        assert!(x & !mask(self.s) == 0, "input out of range");
        let mut acc = 0u64;
        for c in self.coeffs.iter().rev() {
            acc = mul_raw(acc, x, self.s) ^ c.bits;
        }
        acc & mask(self.out_bits)
    }
}

/// Horner evaluation; returns the low `out_bits` bits.
pub fn poly_eval(f: &PolyFn, x: FieldElement) -> Result<u64, FieldError> {
    if x.s != f.s {
        return Err(FieldError::DegreeMismatch(f.s, x.s));
    }
    Ok(f.eval_bits(x.bits))
}

/// Uniformly random degree-(t-1) polynomial: a t-wise independent function.
pub fn sample_twise_family(s: u32, t: usize, out_bits: u32, seed: u64) -> Result<PolyFn, FieldError> {
    check_degree(s)?;
    if t == 0 {
        return Err(FieldError::Dimension("t must be at least 1".into()));
    }
    if s < 64 && (t as u128) >= (1u128 << s) {
        return Err(FieldError::TooManyCoefficients { t, s });
    }
    let mut rng = rng_for(seed, &[0xF1E1D, s as u64, t as u64]);
    let coeffs = (0..t)
        .map(|_| FieldElement {
            bits: rng.random::<u64>() & mask(s),
            s,
        })
        .collect();
    PolyFn::new(coeffs, out_bits)
}

/// Parameters of the rounded subset-product PRF.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BprParams {
    pub q: u64,
    pub p: u64,
    pub n_dim: usize,
    pub m: usize,
    pub l: usize,
}

impl Default for BprParams {
    fn default() -> Self {
        BprParams {
            q: 256,
            p: 4,
            n_dim: 4,
            m: 4,
            l: 8,
        }
    }
}

/// Key for the rounded subset-product PRF. `a` has `n_dim` rows and `m`
/// columns, so `a^T * prod S_i` is `m x n_dim`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BprKey {
    pub params: BprParams,
    pub a: Vec<Vec<u64>>,
    pub s: Vec<Vec<Vec<u64>>>,
}

impl BprKey {
    pub fn new(params: BprParams, a: Vec<Vec<u64>>, s: Vec<Vec<Vec<u64>>>) -> Result<Self, FieldError> {
        let BprParams { q, p, n_dim, m, l } = params;
        if !(2 <= p && p < q) {
            return Err(FieldError::BadModulus { p, q });
        }
        if a.len() != n_dim || a.iter().any(|r| r.len() != m) {
            return Err(FieldError::Dimension(format!("A must be {n_dim}x{m}")));
        }
        if s.len() != l
            || s.iter()
                .any(|mat| mat.len() != n_dim || mat.iter().any(|r| r.len() != n_dim))
        {
            return Err(FieldError::Dimension(format!(
                "need {l} matrices of size {n_dim}x{n_dim}"
            )));
        }
        let entries = a.iter().flatten().chain(s.iter().flatten().flatten());
        if let Some(&bad) = entries.into_iter().find(|&&v| v >= q) {
            return Err(FieldError::Dimension(format!("entry {bad} not reduced mod {q}")));
        }
        Ok(BprKey { params, a, s })
    }

    pub fn sample(params: BprParams, seed: u64) -> Result<Self, FieldError> {
        let mut rng = rng_for(seed, &[0xB9B, params.q, params.p]);
        let q = params.q;
        let mut draw = |rows: usize, cols: usize| -> Vec<Vec<u64>> {
            (0..rows)
                .map(|_| (0..cols).map(|_| rng.random_range(0..q)).collect())
                .collect()
        };
        let a = draw(params.n_dim, params.m);
        let s = (0..params.l).map(|_| draw(params.n_dim, params.n_dim)).collect();
        BprKey::new(params, a, s)
    }
}

fn round_to_p(v: u64, p: u64, q: u64) -> u64 {
    let num = p as u128 * v as u128;
    let (fl, rem) = (num / q as u128, num % q as u128);
    let r = if 2 * rem > q as u128 { fl + 1 } else { fl };
    (r % p as u128) as u64
}

/// `round_p(A^T * prod_{x_i = 1} S_i)`, product taken in index order.
pub fn bpr_prf_eval(k: &BprKey, x: &[bool]) -> Result<Vec<Vec<u64>>, FieldError> {
    let BprParams { q, p, n_dim, m, l } = k.params;
    if x.len() != l {
        return Err(FieldError::Dimension(format!(
            "input has {} bits, key expects {l}",
            x.len()
        )));
    }
    let mut acc: Vec<Vec<u64>> = (0..m).map(|i| (0..n_dim).map(|j| k.a[j][i]).collect()).collect();
    for (i, &bit) in x.iter().enumerate() {
        if !bit {
            continue;
        }
        let s = &k.s[i];
        acc = acc
            .iter()
            .map(|row| {
                (0..n_dim)
                    .map(|c| {
                        let mut sum = 0u128;
                        for (r, &v) in row.iter().enumerate() {
                            sum += v as u128 * s[r][c] as u128;
                        }
                        (sum % q as u128) as u64
                    })
                    .collect()
            })
            .collect();
    }
    Ok(acc
        .into_iter()
        .map(|row| row.into_iter().map(|v| round_to_p(v, p, q)).collect())
        .collect())
}

/// One-bit view of the PRF: XOR of the low bits of all output entries.
pub fn bpr_prf_bit(k: &BprKey, x: &[bool]) -> Result<bool, FieldError> {
    let out = bpr_prf_eval(k, x)?;
    Ok(out.iter().flatten().fold(false, |acc, v| acc ^ (v & 1 == 1)))
}

/// Bits of `x` as a length-`l` input, least significant bit first.
pub fn int_to_bits(x: u64, l: usize) -> Vec<bool> {
    (0..l).map(|i| i < 64 && (x >> i) & 1 == 1).collect()
}
