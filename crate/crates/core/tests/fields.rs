use proptest::prelude::*;
use shallow_core::fields::*;
use std::collections::HashMap;

// Schoolbook oracle: multiply as polynomials with coefficient vectors, then
// long-divide by x^3 + x + 1.
fn gf8_oracle(a: u64, b: u64) -> u64 {
    let mut prod = [0u8; 5];
    for i in 0..3 {
        for j in 0..3 {
            prod[i + j] ^= (((a >> i) & 1) * ((b >> j) & 1)) as u8;
        }
    }
    let modulus = [1u8, 1, 0, 1]; // 1 + x + x^3
    for deg in (3..5).rev() {
        if prod[deg] == 1 {
            for (k, &m) in modulus.iter().enumerate() {
                prod[deg - 3 + k] ^= m;
            }
        }
    }
    (0..3).map(|i| (prod[i] as u64) << i).sum()
}

fn fe(b: u64, s: u32) -> FieldElement {
    FieldElement::new(b, s).unwrap()
}

#[test]
fn gf8_matches_long_division_table() {
    for a in 0..8 {
        for b in 0..8 {
            assert_eq!(gf_mul(fe(a, 3), fe(b, 3)).unwrap().bits(), gf8_oracle(a, b), "{a}*{b}");
        }
    }
    assert_eq!(gf8_oracle(0b110, 0b011), 0b001);
    assert_eq!(gf_mul(fe(0b110, 3), fe(0b011, 3)).unwrap().bits(), 0b001);
}

#[test]
fn worked_poly_eval() {
    let f = PolyFn::new(vec![fe(0b001, 3), fe(0b010, 3)], 1).unwrap();
    let expected = (1 ^ gf8_oracle(0b010, 0b011)) & 1;
    assert_eq!(expected, 1);
    assert_eq!(poly_eval(&f, fe(0b011, 3)).unwrap(), expected);
    assert!(poly_eval(&f, fe(1, 4)).is_err());
}

#[test]
fn worked_prf_value() {
    let params = BprParams {
        q: 64,
        p: 4,
        n_dim: 2,
        m: 2,
        l: 2,
    };
    let key = BprKey::new(
        params,
        vec![vec![17, 42], vec![5, 63]],
        vec![vec![vec![3, 8], vec![21, 1]], vec![vec![40, 7], vec![2, 55]]],
    )
    .unwrap();
    // A^T S1 S2 mod 64 = [[58,15],[6,24]]; v/16 rounded, 24/16 is a tie.
    assert_eq!(
        bpr_prf_eval(&key, &int_to_bits(0b11, 2)).unwrap(),
        vec![vec![0, 1], vec![0, 1]]
    );
    assert!(!bpr_prf_bit(&key, &[true, true]).unwrap());
}

#[test]
fn prf_deterministic_and_in_range() {
    let k1 = BprKey::sample(BprParams::default(), 11).unwrap();
    let k2 = BprKey::sample(BprParams::default(), 11).unwrap();
    assert_eq!(k1, k2);
    for x in 0..256u64 {
        let bits = int_to_bits(x, 8);
        let out = bpr_prf_eval(&k1, &bits).unwrap();
        assert_eq!(out, bpr_prf_eval(&k2, &bits).unwrap());
        assert!(out.iter().flatten().all(|&v| v < 4));
    }
}

// Exhaustive check over the whole key space: for every set of t distinct
// inputs, each output tuple is hit by exactly |keys| / 2^(t*out) keys.
fn exact_twise(s: u32, t: usize, out_bits: u32) {
    let q = 1u64 << s;
    let n_keys = q.pow(t as u32);
    let inputs: Vec<Vec<u64>> = combinations(q, t);
    let funcs: Vec<PolyFn> = (0..n_keys)
        .map(|k| {
            let coeffs = (0..t).map(|i| fe((k / q.pow(i as u32)) % q, s)).collect();
            PolyFn::new(coeffs, out_bits).unwrap()
        })
        .collect();
    let cells = 1u64 << (out_bits as usize * t);
    for xs in &inputs {
        let mut counts: HashMap<u64, u64> = HashMap::new();
        for f in &funcs {
            let mut key = 0u64;
            for &x in xs {
                key = (key << out_bits) | f.eval_bits(x);
            }
            *counts.entry(key).or_default() += 1;
        }
        assert_eq!(counts.len() as u64, cells, "s={s} t={t} inputs={xs:?}");
        assert!(
            counts.values().all(|&c| c == n_keys / cells),
            "s={s} t={t} inputs={xs:?}"
        );
    }
}

fn combinations(q: u64, t: usize) -> Vec<Vec<u64>> {
    fn rec(start: u64, q: u64, t: usize, cur: &mut Vec<u64>, out: &mut Vec<Vec<u64>>) {
        if cur.len() == t {
            out.push(cur.clone());
            return;
        }
        for v in start..q {
            cur.push(v);
            rec(v + 1, q, t, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, q, t, &mut Vec::new(), &mut out);
    out
}

#[test]
fn pairwise_uniform_on_gf8_single_bit() {
    exact_twise(3, 2, 1);
}

#[test]
fn exact_independence_small_fields() {
    for s in 1..=4u32 {
        for t in 1..=3usize {
            if (t as u64) >= (1u64 << s) {
                continue;
            }
            for out_bits in [1, s] {
                exact_twise(s, t, out_bits);
            }
        }
    }
}

proptest! {
    #[test]
    fn field_axioms(s in 1u32..=64, a in any::<u64>(), b in any::<u64>(), c in any::<u64>()) {
        let m = if s == 64 { u64::MAX } else { (1u64 << s) - 1 };
        let (a, b, c) = (fe(a & m, s), fe(b & m, s), fe(c & m, s));
        prop_assert_eq!(gf_mul(a, b).unwrap(), gf_mul(b, a).unwrap());
        prop_assert_eq!(
            gf_mul(gf_mul(a, b).unwrap(), c).unwrap(),
            gf_mul(a, gf_mul(b, c).unwrap()).unwrap()
        );
        prop_assert_eq!(
            gf_mul(a, b.add(c).unwrap()).unwrap(),
            gf_mul(a, b).unwrap().add(gf_mul(a, c).unwrap()).unwrap()
        );
    }

    #[test]
    fn prf_outputs_below_p(seed in any::<u64>(), x in any::<u8>()) {
        let key = BprKey::sample(BprParams::default(), seed).unwrap();
        let out = bpr_prf_eval(&key, &int_to_bits(x as u64, 8)).unwrap();
        prop_assert!(out.iter().flatten().all(|&v| v < 4));
    }
}
