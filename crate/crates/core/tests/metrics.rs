use mrvpc_core::metrics::{align, cider_corpus, consistency_f1, meteor_lite, r4};
use mrvpc_core::rng::stream;
use proptest::prelude::*;
use rand::Rng;

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn grams(t: &[String], n: usize) -> Vec<Vec<String>> {
    if t.len() < n {
        return vec![];
    }
    (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
}

fn count(list: &[Vec<String>], g: &[String]) -> f64 {
    list.iter().filter(|x| x.as_slice() == g).count() as f64
}

/// Straight nested-loop TF-IDF CIDEr-D, one reference per instance.
fn oracle(cands: &[Vec<String>], refs: &[Vec<String>]) -> Vec<f64> {
    let n_docs = refs.len() as f64;
    let mut out = vec![];
    for (c, r) in cands.iter().zip(refs) {
        if c.is_empty() {
            out.push(0.0);
            continue;
        }
        let mut sum = 0.0;
        for n in 1..=4 {
            let cg = grams(c, n);
            let rg = grams(r, n);
            let mut keys: Vec<Vec<String>> = vec![];
            for g in cg.iter().chain(&rg) {
                if !keys.contains(g) {
                    keys.push(g.clone());
                }
            }
            let idf = |g: &[String]| {
                let df = refs.iter().filter(|d| grams(d, n).iter().any(|x| x.as_slice() == g)).count() as f64;
                n_docs.ln() - df.max(1.0).ln()
            };
            let (mut dot, mut nc, mut nr) = (0.0, 0.0, 0.0);
            for k in &keys {
                let w = idf(k);
                let vc = count(&cg, k) * w;
                let vr = count(&rg, k) * w;
                dot += vc.min(vr) * vr;
                nc += vc * vc;
                nr += vr * vr;
            }
            let mut sim = dot;
            if nc > 0.0 && nr > 0.0 {
                sim /= nc.sqrt() * nr.sqrt();
            }
            let d = c.len() as f64 - r.len() as f64;
            sum += sim * (-(d * d) / 72.0).exp();
        }
        out.push(10.0 * sum / 4.0);
    }
    out
}

fn random_corpus(seed: u64) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
    let mut rng = stream(seed, "cider-corpus", 0);
    let size = rng.random_range(2..=20);
    let words = ["cut", "the", "onion", "pour", "oil", ".", "stir", "pan"];
    let sent = |rng: &mut mrvpc_core::rng::Rng| -> Vec<String> {
        let len = rng.random_range(0..=20);
        (0..len).map(|_| words[rng.random_range(0..words.len())].to_string()).collect()
    };
    let refs: Vec<_> = (0..size).map(|_| sent(&mut rng)).collect();
    let cands = refs
        .iter()
        .map(|r| {
            if rng.random_bool(0.3) {
                r.clone()
            } else {
                sent(&mut rng)
            }
        })
        .collect();
    (cands, refs)
}

#[test]
fn cider_matches_brute_force_oracle() {
    for seed in 0..20 {
        let (c, r) = random_corpus(seed);
        let (mean, per) = cider_corpus(&c, &r).unwrap();
        let expected = oracle(&c, &r);
        for (a, b) in per.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-9, "seed {seed}: {a} vs {b}");
        }
        let em = expected.iter().sum::<f64>() / expected.len() as f64;
        assert!((mean - em).abs() < 1e-9);
    }
}

#[test]
fn cider_is_bitwise_repeatable() {
    let (c, r) = random_corpus(7);
    let (mean, per) = cider_corpus(&c, &r).unwrap();
    for _ in 0..50 {
        let (m, p) = cider_corpus(&c, &r).unwrap();
        assert_eq!(m.to_bits(), mean.to_bits());
        assert!(p.iter().zip(&per).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn cider_doubling_the_corpus() {
    for seed in 0..10 {
        let (c, r) = random_corpus(100 + seed);
        let c2: Vec<_> = c.iter().chain(&c).cloned().collect();
        let r2: Vec<_> = r.iter().chain(&r).cloned().collect();
        let (doubled, per) = cider_corpus(&c2, &r2).unwrap();
        let expected = oracle(&c2, &r2);
        for (a, b) in per.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!((doubled - expected.iter().sum::<f64>() / expected.len() as f64).abs() < 1e-9);

        // When every candidate n-gram occurs in some reference, each weight
        // ln 2N - ln 2df equals ln N - ln df and the score is unchanged.
        let rotated: Vec<_> = r.iter().cycle().skip(1).take(r.len()).cloned().collect();
        let (base, _) = cider_corpus(&rotated, &r).unwrap();
        let rot2: Vec<_> = rotated.iter().chain(&rotated).cloned().collect();
        let (twice, _) = cider_corpus(&rot2, &r2).unwrap();
        assert!((base - twice).abs() < 1e-9, "{base} vs {twice}");
    }
}

#[test]
fn cider_self_match_is_maximal_for_each_reference() {
    let refs = vec![
        toks("cut the onion . pour the oil ."),
        toks("stir the pan ."),
        toks("pour the oil . stir the oil ."),
        toks("cut the pan ."),
    ];
    let (_, per) = cider_corpus(&refs, &refs).unwrap();
    let pool: Vec<Vec<String>> = refs.iter().cloned().chain([toks("the the the ."), toks("cut the onion .")]).collect();
    for i in 0..refs.len() {
        for other in &pool {
            let mut cands = refs.clone();
            cands[i] = other.clone();
            let (_, alt) = cider_corpus(&cands, &refs).unwrap();
            assert!(alt[i] <= per[i] + 1e-12, "reference {i}: {} beats {}", alt[i], per[i]);
        }
        assert!(per[i] > 0.0);
    }
    let (_, none) = cider_corpus(&[toks("x y"), toks("z")], &refs[..2]).unwrap();
    assert_eq!(none, vec![0.0, 0.0]);
}

#[test]
fn r4_and_meteor_hand_cases() {
    assert_eq!(r4(&toks("a b c d a b c d")), 0.2);
    assert_eq!(r4(&toks("x x x x x")), 0.5);
    assert_eq!(r4(&toks("a b c d e f")), 0.0);
    assert_eq!(meteor_lite(&toks("a b c d"), &toks("a b c d")), 0.9921875);
    assert_eq!(meteor_lite(&toks("a b"), &toks("c d")), 0.0);
    assert_eq!(meteor_lite(&toks("q"), &toks("q")), 0.5);
    assert_eq!(consistency_f1(&toks("a b"), &toks("a c")), 0.5);
}

fn word() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["a", "b", "c", "the", "."]).prop_map(str::to_string)
}

/// Fewest chunks over every maximal alignment, by exhaustive search.
fn brute_chunks(c: &[String], r: &[String]) -> (usize, usize) {
    fn rec(c: &[String], r: &[String], i: usize, used: &mut Vec<bool>, pairs: &mut Vec<(usize, usize)>, best: &mut (usize, usize)) {
        if i == c.len() {
            let m = pairs.len();
            let mut chunks = 0;
            for (k, &(a, b)) in pairs.iter().enumerate() {
                if k == 0 || pairs[k - 1] != (a.wrapping_sub(1), b.wrapping_sub(1)) {
                    chunks += 1;
                }
            }
            if m > best.0 || (m == best.0 && chunks < best.1) {
                *best = (m, chunks);
            }
            return;
        }
        rec(c, r, i + 1, used, pairs, best);
        for j in 0..r.len() {
            if !used[j] && r[j] == c[i] {
                used[j] = true;
                pairs.push((i, j));
                rec(c, r, i + 1, used, pairs, best);
                pairs.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (0, usize::MAX);
    rec(c, r, 0, &mut vec![false; r.len()], &mut vec![], &mut best);
    if best.0 == 0 {
        (0, 0)
    } else {
        best
    }
}

proptest! {
    #[test]
    fn alignment_is_optimal(c in prop::collection::vec(word(), 0..8), r in prop::collection::vec(word(), 0..8)) {
        let a = align(&c, &r);
        prop_assert!(a.exact);
        prop_assert_eq!((a.matches, a.chunks), brute_chunks(&c, &r));
    }

    #[test]
    fn meteor_bounds_and_self_maximality(c in prop::collection::vec(word(), 1..10), r in prop::collection::vec(word(), 1..10)) {
        let s = meteor_lite(&c, &r);
        let m = align(&c, &r).matches as f64;
        prop_assert!((0.0..=1.0).contains(&s));
        let p = m / c.len() as f64;
        let rc = m / r.len() as f64;
        if m > 0.0 {
            prop_assert!(s <= 10.0 * p * rc / (rc + 9.0 * p) + 1e-12);
        }
        prop_assert!(s <= meteor_lite(&r, &r) + 1e-12 || c.len() != r.len());
    }

    #[test]
    fn r4_is_invariant_under_relabeling(t in prop::collection::vec(0u8..4, 0..16)) {
        let a: Vec<String> = t.iter().map(|x| format!("w{x}")).collect();
        let b: Vec<String> = t.iter().map(|x| format!("v{}", 3 - x)).collect();
        let v = r4(&a);
        prop_assert_eq!(v, r4(&b));
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn consistency_is_symmetric_and_bounded(a in prop::collection::vec(word(), 0..8), b in prop::collection::vec(word(), 0..8)) {
        let x = consistency_f1(&a, &b);
        prop_assert_eq!(x, consistency_f1(&b, &a));
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(consistency_f1(&a, &a), 1.0);
    }
}
