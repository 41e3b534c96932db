use super::*;
use alloc::vec;
use proptest::prelude::*;

fn trace(d: &[f64], total: f64) -> DelayTrace {
    DelayTrace {
        delays: d.to_vec(),
        total_s: total,
    }
}

fn pt(al: f64, bleu: f64) -> CurvePoint {
    CurvePoint {
        alpha: 0.0,
        al,
        laal: al,
        bleu,
        n_sentences: 1,
        empty_hypotheses: 0,
    }
}

#[test]
fn bleu_fixtures() {
    let r = vec![vec!["a", "b", "c", "d", "e"]];
    assert!((corpus_bleu(&r, &r).unwrap() - 100.0).abs() < 1e-12);
    assert_eq!(corpus_bleu(&[vec![]], &r).unwrap(), 0.0);
    let h = vec![vec!["a", "b", "c", "d"]];
    let r = vec![vec!["a", "b", "c", "e"]];
    let b = corpus_bleu(&h, &r).unwrap();
    // 100 * (3/4 * 2/3 * 1/2 * 1/2)^(1/4)
    assert!((b - 59.46035575013605).abs() < 1e-9, "{b}");
    assert!(corpus_bleu::<u8>(&[], &[]).is_err());
    assert!(corpus_bleu(&h, &[]).is_err());
}

#[test]
fn bleu_brevity_penalty() {
    let h = vec![vec![1, 2, 3, 4]];
    let r = vec![vec![1, 2, 3, 4, 5, 6, 7, 8]];
    // All precisions 1, BP = exp(1 - 8/4).
    let b = corpus_bleu(&h, &r).unwrap();
    assert!((b - 100.0 * libm::exp(-1.0)).abs() < 1e-9);
    // Longer hypotheses are not penalized by BP.
    let b = corpus_bleu(&r, &h).unwrap();
    assert!(b < 100.0 && b > 0.0);
}

#[test]
fn al_fixtures() {
    assert_eq!(average_lagging(&trace(&[4.0, 4.0, 4.0], 4.0), 3).unwrap(), 4.0);
    assert_eq!(average_lagging(&trace(&[0.0, 1.0, 2.0, 3.0], 4.0), 4).unwrap(), 0.0);
    let al = average_lagging(&trace(&[1.0, 2.0, 3.0, 4.0], 4.0), 4).unwrap();
    assert!((al - 1.0).abs() < 1e-12);
    assert_eq!(average_lagging(&trace(&[], 2.5), 3).unwrap(), 2.5);
    assert!(average_lagging(&trace(&[1.0], 4.0), 0).is_err());
    assert!(average_lagging(&trace(&[2.0, 1.0], 4.0), 2).is_err());
}

#[test]
fn laal_fixtures() {
    let t = trace(&[1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0], 4.0);
    let l = laal(&t, 4, 8).unwrap();
    assert!((l - 5.5 / 7.0).abs() < 1e-12);
    let a = average_lagging(&t, 4).unwrap();
    assert!((a + 5.0 / 7.0).abs() < 1e-12);
    let short = trace(&[1.0, 2.0, 4.0], 4.0);
    assert_eq!(laal(&short, 4, 3).unwrap(), average_lagging(&short, 4).unwrap());
}

#[test]
fn nose_fixtures() {
    let c = CurveSpec::new(vec![pt(3.0, 20.0), pt(1.0, 10.0)], 1.0, 3.0, 20.0);
    assert_eq!(nose(&c).unwrap(), 0.75);
    let flat = CurveSpec::new(vec![pt(0.5, 30.0), pt(1.5, 30.0), pt(4.0, 30.0)], 1.0, 3.0, 30.0);
    assert_eq!(nose(&flat).unwrap(), 1.0);
    let inner = CurveSpec::new(vec![pt(0.0, 0.0), pt(4.0, 40.0)], 1.0, 3.0, 40.0);
    assert!((nose(&inner).unwrap() - 0.5).abs() < 1e-15);
}

#[test]
fn nose_refuses_to_extrapolate() {
    let c = CurveSpec::new(vec![pt(1.2, 10.0), pt(3.0, 20.0)], 1.0, 3.0, 20.0);
    assert!(matches!(nose(&c), Err(Error::OutOfDomain(_))));
    let c = CurveSpec::new(vec![pt(1.0, 10.0), pt(2.9, 20.0)], 1.0, 3.0, 20.0);
    assert!(matches!(nose(&c), Err(Error::OutOfDomain(_))));
    let one = CurveSpec::new(vec![pt(2.0, 10.0)], 1.0, 3.0, 20.0);
    assert!(nose(&one).is_err());
    let degenerate = CurveSpec::new(vec![pt(2.0, 10.0), pt(2.0, 10.0)], 2.0, 2.0, 20.0);
    assert!(nose(&degenerate).is_err());
    let no_ref = CurveSpec::new(vec![pt(1.0, 10.0), pt(3.0, 20.0)], 1.0, 3.0, 0.0);
    assert!(nose(&no_ref).is_err());
}

#[test]
fn bounds_and_operating_points() {
    let a = [pt(0.5, 1.0), pt(2.0, 5.0)];
    let b = [pt(1.0, 1.0), pt(3.0, 5.0)];
    assert_eq!(shared_bounds(&[&a, &b]), Some((1.0, 2.0)));
    let c = [pt(2.5, 1.0), pt(3.0, 5.0)];
    assert_eq!(shared_bounds(&[&a, &c]), None);
    let curve = [pt(1.0, 10.0), pt(2.0, 20.0), pt(3.0, 30.0)];
    assert_eq!(min_al_reaching(&curve, 5.0), Some(1.0));
    assert_eq!(min_al_reaching(&curve, 25.0), Some(2.5));
    assert_eq!(min_al_reaching(&curve, 31.0), None);
    let (kept, warnings) = dedup_alphas(&[0.5, 0.7, 0.5]);
    assert_eq!(kept, vec![0.5, 0.7]);
    assert_eq!(warnings.len(), 1);
}

prop_compose! {
    fn corpus()(n in 1usize..6)
        (pairs in prop::collection::vec(
            (prop::collection::vec(0u8..4, 0..8), prop::collection::vec(0u8..4, 1..8)), n),
         seed in any::<u64>())
        -> (Vec<(Vec<u8>, Vec<u8>)>, u64) {
        (pairs, seed)
    }
}

fn sorted_curve(raw: &[(f64, f64)]) -> Vec<CurvePoint> {
    let mut pts: Vec<CurvePoint> = raw.iter().map(|&(a, b)| pt(a, b)).collect();
    pts.sort_by(|a, b| a.al.total_cmp(&b.al));
    pts
}

proptest! {
    #[test]
    fn bleu_ignores_sentence_order((pairs, seed) in corpus()) {
        let (h, r): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
        let mut idx: Vec<usize> = (0..pairs.len()).collect();
        let k = (seed as usize) % idx.len();
        idx.rotate_left(k);
        idx.reverse();
        let h2: Vec<_> = idx.iter().map(|&i| h[i].clone()).collect();
        let r2: Vec<_> = idx.iter().map(|&i| r[i].clone()).collect();
        let a = corpus_bleu(&h, &r).unwrap();
        prop_assert_eq!(a, corpus_bleu(&h2, &r2).unwrap());
        prop_assert!((0.0..=100.0 + 1e-9).contains(&a));
    }

    #[test]
    fn laal_never_below_al(
        steps in prop::collection::vec(0u8..3, 1..10),
        ref_len in 1usize..10,
    ) {
        let mut d = Vec::new();
        let mut acc = 0.0;
        for s in &steps {
            acc += *s as f64 * 0.25;
            d.push(acc);
        }
        let total = acc.max(0.25);
        let t = trace(&d, total);
        let al = average_lagging(&t, ref_len).unwrap();
        let la = laal(&t, ref_len, d.len()).unwrap();
        prop_assert!(la >= al - 1e-12);
    }

    #[test]
    fn al_shifts_with_the_trace(
        steps in prop::collection::vec(0u8..3, 1..10),
        ref_len in 1usize..10,
        c in 0.0f64..3.0,
    ) {
        // Keep every delay strictly below the total so tau is |hyp| before and after.
        let mut d = Vec::new();
        let mut acc = 0.0;
        for s in &steps {
            acc += *s as f64 * 0.25;
            d.push(acc);
        }
        let total = acc + 1.0;
        let base = average_lagging(&trace(&d, total), ref_len).unwrap();
        let shifted: Vec<f64> = d.iter().map(|x| x + c).collect();
        // Pacing uses the original duration; only the delays move.
        let t = trace(&shifted, total + c);
        let step = (total + c) / ref_len as f64 - total / ref_len as f64;
        let n = d.len() as f64;
        let expected = base + c - step * (n - 1.0) / 2.0;
        prop_assert!((average_lagging(&t, ref_len).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn nose_is_scale_invariant_and_bounded(
        raw in prop::collection::vec((0.0f64..5.0, 0.0f64..50.0), 2..8),
        s in 0.1f64..2.0,
        off in 10.0f64..50.0,
    ) {
        let pts = sorted_curve(&raw);
        let (lo, hi) = (pts[0].al, pts[pts.len() - 1].al);
        prop_assume!(hi - lo > 1e-3);
        let (x, y) = (lo + 0.25 * (hi - lo), hi - 0.25 * (hi - lo));
        let a = nose(&CurveSpec::new(pts.clone(), x, y, off)).unwrap();
        let scaled: Vec<CurvePoint> = pts.iter().map(|p| pt(p.al, p.bleu * s)).collect();
        let b = nose(&CurveSpec::new(scaled, x, y, off * s)).unwrap();
        prop_assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
        let max = pts.iter().map(|p| p.bleu).fold(0.0, f64::max);
        prop_assert!(a <= max / off + 1e-12);
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn nose_is_one_only_for_the_flat_offline_curve(
        als in prop::collection::vec(0.0f64..5.0, 3..7),
        dip in 0usize..7,
        depth in 0.5f64..20.0,
    ) {
        let mut raw: Vec<(f64, f64)> = als.iter().map(|&a| (a, 40.0)).collect();
        let pts = sorted_curve(&raw);
        let (lo, hi) = (pts[0].al, pts[pts.len() - 1].al);
        prop_assume!(hi - lo > 1e-2);
        prop_assert_eq!(nose(&CurveSpec::new(pts, lo, hi, 40.0)).unwrap(), 1.0);
        let i = dip % raw.len();
        raw[i].1 -= depth;
        let pts = sorted_curve(&raw);
        let v = nose(&CurveSpec::new(pts, lo, hi, 40.0)).unwrap();
        prop_assert!(v < 1.0);
    }
}
