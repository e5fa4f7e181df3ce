//! SAGE scores checked against a brute-force coordinate-ascent solver that
//! shares no code with the library.

use std::collections::BTreeMap;

use sugmine::explain::{sage_scores, SageConfig};

struct Oracle {
    counts: Vec<f64>,
    log_bg: Vec<f64>,
    lambda: f64,
}

impl Oracle {
    fn objective(&self, eta: &[f64]) -> f64 {
        let logits: Vec<f64> = self.log_bg.iter().zip(eta).map(|(b, e)| b + e).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        let total: f64 = self.counts.iter().sum();
        self.counts.iter().zip(&logits).map(|(c, l)| c * l).sum::<f64>()
            - total * lse
            - self.lambda * eta.iter().map(|e| e.abs()).sum::<f64>()
    }

    /// Golden-section search on each coordinate in turn; the objective is
    /// concave so each 1-D problem has a single maximum.
    fn solve(&self) -> Vec<f64> {
        let n = self.counts.len();
        let mut eta = vec![0.0; n];
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        for _sweep in 0..400 {
            let before = eta.clone();
            for j in 0..n {
                let f = |x: f64, eta: &mut Vec<f64>| {
                    eta[j] = x;
                    self.objective(eta)
                };
                let (mut a, mut b) = (eta[j] - 8.0, eta[j] + 8.0);
                while b - a > 1e-10 {
                    let c = b - phi * (b - a);
                    let d = a + phi * (b - a);
                    if f(c, &mut eta) > f(d, &mut eta) {
                        b = d;
                    } else {
                        a = c;
                    }
                }
                let mid = 0.5 * (a + b);
                // the ℓ1 kink: snap to zero when zero is at least as good
                let at_mid = f(mid, &mut eta);
                let at_zero = f(0.0, &mut eta);
                eta[j] = if at_zero >= at_mid { 0.0 } else { mid };
            }
            let moved = eta.iter().zip(&before).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if moved < 1e-9 {
                break;
            }
        }
        eta
    }
}

#[test]
fn boosted_token_gets_the_largest_eta() {
    let words: Vec<String> = (0..12).map(|i| format!("w{i:02}")).collect();
    let mut background = BTreeMap::new();
    let mut target = BTreeMap::new();
    for (i, w) in words.iter().enumerate() {
        background.insert(w.clone(), 200 + 10 * i as u64);
        target.insert(w.clone(), 20 + i as u64);
    }
    // w05 appears 50 times more often in the target than its background share suggests
    target.insert("w05".into(), 50 * 25);

    let cfg = SageConfig {
        lambda: 2.0,
        tol: 1e-10,
        max_iters: 200_000,
        ..SageConfig::default()
    };
    let out = sage_scores(&target, &background, &cfg).unwrap();
    assert!(out.converged);
    assert_eq!(out.entries[0].token, "w05");
    assert!(out.entries[0].eta > out.entries[1].eta);

    let bg_total: f64 = words.iter().map(|w| background[w] as f64 + cfg.alpha).sum();
    let oracle = Oracle {
        counts: words.iter().map(|w| target[w] as f64).collect(),
        log_bg: words.iter().map(|w| ((background[w] as f64 + cfg.alpha) / bg_total).ln()).collect(),
        lambda: cfg.lambda,
    };
    let want = oracle.solve();
    let best = want.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(want.iter().position(|e| *e == best), Some(5));

    let got: BTreeMap<&str, f64> = out.entries.iter().map(|e| (e.token.as_str(), e.eta)).collect();
    for (w, e) in words.iter().zip(&want) {
        assert!((got[w.as_str()] - e).abs() < 1e-4, "{w}: {} vs oracle {e}", got[w.as_str()]);
    }
}
