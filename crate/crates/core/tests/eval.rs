use ctmkit_core::corpus::Vocab;
use ctmkit_core::eval::{
    confusion_and_precision, expected_random_match, kl_divergence, match_rate, mean_kl, npmi_coherence,
    npmi_from_ids, shuffled_baseline, topic_histogram, write_confusion_png, EvalError, DEFAULT_NPMI_EPS,
};
use ctmkit_core::nnkernel::softmax_in_place;
use ctmkit_core::{argmax, BowVector, Matrix, RngStream};
use proptest::prelude::*;

fn random_theta(n: usize, tau: usize, rng: &mut RngStream) -> Matrix {
    let mut m = Matrix::zeros(n, tau);
    for i in 0..n {
        let row = m.row_mut(i);
        for v in row.iter_mut() {
            *v = 2.0 * rng.standard_normal();
        }
        softmax_in_place(row);
    }
    m
}

#[test]
fn independent_words_have_near_zero_npmi() {
    let mut rng = RngStream::new(10);
    let reference: Vec<BowVector> = (0..10_000)
        .map(|_| {
            let mut pairs = vec![(2, 1)];
            for w in 0..2 {
                if rng.uniform() < 0.5 {
                    pairs.push((w, 1));
                }
            }
            BowVector::from_pairs(pairs)
        })
        .collect();
    let s = npmi_from_ids(&[vec![0, 1]], &reference, DEFAULT_NPMI_EPS).unwrap();
    assert!(s.mean.abs() < 0.05, "{}", s.mean);
}

#[test]
fn absent_tokens_are_reported_and_skipped() {
    let vocab = Vocab::from_token_list(["a", "b", "c"]).unwrap();
    let reference = vec![
        BowVector::from_pairs([(0, 1), (1, 1)]),
        BowVector::from_pairs([(0, 2)]),
        BowVector::from_pairs([(2, 1)]),
    ];
    let tops = vec![
        vec!["a".to_string(), "b".to_string(), "ghost".to_string()],
        vec!["ghost".to_string(), "phantom".to_string()],
    ];
    let s = npmi_coherence(&tops, &vocab, &reference, DEFAULT_NPMI_EPS).unwrap();
    assert_eq!(s.skipped_tokens, vec!["ghost", "phantom"]);
    assert!(s.per_topic[0].is_some());
    assert_eq!(s.per_topic[1], None);
    assert_eq!(s.mean, s.per_topic[0].unwrap());

    let only_ghosts = vec![vec!["ghost".to_string(), "phantom".to_string()]];
    assert!(matches!(
        npmi_coherence(&only_ghosts, &vocab, &reference, DEFAULT_NPMI_EPS),
        Err(EvalError::NoValidPairs)
    ));
    assert!(matches!(
        npmi_coherence(&[vec!["a".to_string()]], &vocab, &reference, DEFAULT_NPMI_EPS),
        Err(EvalError::ShortTopList(0))
    ));
}

#[test]
fn match_and_kl_against_loops() {
    let mut rng = RngStream::new(1);
    let p = random_theta(200, 5, &mut rng);
    let q = random_theta(200, 5, &mut rng);
    let mut hits = 0;
    let mut kl = 0.0;
    for i in 0..200 {
        let (a, b) = (p.row(i), q.row(i));
        let ia = (0..5).fold(0, |best, k| if a[k] > a[best] { k } else { best });
        let ib = (0..5).fold(0, |best, k| if b[k] > b[best] { k } else { best });
        hits += (ia == ib) as usize;
        kl += (0..5).map(|k| a[k] * (a[k] / b[k]).ln()).sum::<f64>();
    }
    assert_eq!(match_rate(&p, &q).unwrap(), 100.0 * hits as f64 / 200.0);
    assert!((mean_kl(&p, &q).unwrap() - kl / 200.0).abs() < 1e-12);
    assert_eq!(match_rate(&p, &p).unwrap(), 100.0);
    assert_eq!(mean_kl(&p, &p).unwrap(), 0.0);
    assert!(matches!(match_rate(&p, &Matrix::zeros(3, 5)), Err(EvalError::ShapeMismatch(..))));
}

#[test]
fn two_topic_shuffle_near_half() {
    let mut rng = RngStream::new(2);
    let n = 4000;
    let p = random_theta(n, 2, &mut rng);
    let (m, _) = shuffled_baseline(&p, &p, &mut rng).unwrap();
    let expected = expected_random_match(&p, &p);
    // Three standard errors of a Bernoulli mean, in percent.
    let tol = 300.0 * (0.25f64 / n as f64).sqrt();
    assert!((m - expected).abs() < tol, "{m} vs {expected}");
    assert!((expected - 50.0).abs() < tol, "{expected}");
}

#[test]
fn confusion_against_counting() {
    let mut rng = RngStream::new(3);
    let p = random_theta(100, 4, &mut rng);
    let q = random_theta(100, 4, &mut rng);
    let c = confusion_and_precision(&p, &q).unwrap();
    for e in 0..4 {
        let rows: Vec<usize> = (0..100).filter(|&i| argmax(p.row(i)) == e).collect();
        for t in 0..4 {
            let hits = rows.iter().filter(|&&i| argmax(q.row(i)) == t).count();
            let expected = if rows.is_empty() { 0.0 } else { hits as f64 / rows.len() as f64 };
            assert!((c.matrix[e][t] - expected).abs() < 1e-15);
        }
    }
    for k in 0..4 {
        let col = (0..100).filter(|&i| argmax(q.row(i)) == k).count();
        let both = (0..100).filter(|&i| argmax(q.row(i)) == k && argmax(p.row(i)) == k).count();
        let expected = if col == 0 { 0.0 } else { both as f64 / col as f64 };
        assert!((c.precision[k] - expected).abs() < 1e-15);
    }
    let h = topic_histogram(&p);
    for k in 0..4 {
        assert_eq!(h[k], (0..100).filter(|&i| argmax(p.row(i)) == k).count());
    }
    assert_eq!(h.iter().sum::<usize>(), 100);
}

#[test]
fn collapsed_target_stripes_one_column() {
    let tau = 100;
    let mut rng = RngStream::new(4);
    let p = random_theta(500, tau, &mut rng);
    let mut q = Matrix::zeros(500, tau);
    for i in 0..500 {
        q[(i, 81)] = 1.0;
    }
    let c = confusion_and_precision(&p, &q).unwrap();
    for (e, row) in c.matrix.iter().enumerate() {
        if c.empty_rows.contains(&e) {
            assert!(row.iter().all(|&v| v == 0.0));
        } else {
            assert_eq!(row[81], 1.0);
            assert_eq!(row.iter().sum::<f64>(), 1.0);
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.png");
    write_confusion_png(&path, &c, 2).unwrap();
    let img = image::open(&path).unwrap().to_rgb8();
    assert_eq!(img.dimensions(), (200, 200));
    let populated = (0..tau).find(|e| !c.empty_rows.contains(e)).unwrap() as u32;
    assert_eq!(img.get_pixel(81 * 2, populated * 2).0, [8, 48, 107]);
    assert_eq!(img.get_pixel(80 * 2, populated * 2).0, [255, 255, 255]);
}

fn distribution(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, len).prop_map(|v| {
        let s: f64 = v.iter().sum::<f64>() + 1e-9;
        v.iter().map(|x| (x + 1e-9 / v.len() as f64) / s).collect()
    })
}

proptest! {
    #[test]
    fn kl_nonnegative(p in distribution(6), q in distribution(6)) {
        prop_assert!(kl_divergence(&p, &q) >= -1e-12);
        prop_assert!(kl_divergence(&p, &p).abs() < 1e-12);
    }
}
