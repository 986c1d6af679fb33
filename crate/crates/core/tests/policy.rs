mod common;

use cfparse_core::mrl::LinearQuery;
use cfparse_core::policy::{ce_loss, ce_train_step, greedy_decode, Adadelta, AdadeltaConfig, ModelConfig, Policy};
use cfparse_core::vocab::{Vocab, BOS_ID, EOS_ID};
use common::*;
use proptest::prelude::*;
use rand::Rng;

/// Independent scalar re-implementation of one forward pass. Reads every
/// weight by tensor name and index, with no shared kernels.
struct Oracle<'a> {
    p: &'a Policy,
}

impl<'a> Oracle<'a> {
    fn w(&self, name: &str, i: usize, j: usize) -> f64 {
        let t = self.p.layout().tensors().iter().find(|t| t.name == name).unwrap();
        assert!(i < t.rows && j < t.cols, "{name}[{i},{j}]");
        self.p.params()[t.offset + i * t.cols + j]
    }

    fn gru(&self, prefix: &str, x: &[f64], h: &[f64]) -> Vec<f64> {
        let n = h.len();
        let (wn, un, bn) = (format!("{prefix}.W"), format!("{prefix}.U"), format!("{prefix}.b"));
        let pre = |gate: usize, i: usize, hv: &[f64]| {
            let row = gate * n + i;
            let mut a = self.w(&bn, row, 0);
            for (j, xj) in x.iter().enumerate() {
                a += self.w(&wn, row, j) * xj;
            }
            for (j, hj) in hv.iter().enumerate() {
                a += self.w(&un, row, j) * hj;
            }
            a
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let z: Vec<f64> = (0..n).map(|i| sig(pre(0, i, h))).collect();
        let r: Vec<f64> = (0..n).map(|i| sig(pre(1, i, h))).collect();
        let rh: Vec<f64> = (0..n).map(|i| r[i] * h[i]).collect();
        (0..n)
            .map(|i| {
                let cand = pre(2, i, &rh).tanh();
                z[i] * h[i] + (1.0 - z[i]) * cand
            })
            .collect()
    }

    fn row(&self, name: &str, i: usize, len: usize) -> Vec<f64> {
        (0..len).map(|j| self.w(name, i, j)).collect()
    }

    /// `log π(y_j | y_<j, x)` for every position of `y` (ids, EOS included).
    fn token_logprobs(&self, x: &[usize], y: &[usize]) -> Vec<f64> {
        let cfg = self.p.config();
        let (h, e) = (cfg.hidden, cfg.emb);
        let v = self.p.tgt_vocab().len();
        let n = x.len();
        let mut fwd = vec![vec![0.0; h]];
        for &id in x {
            let next = self.gru("enc_fwd", &self.row("src_emb", id, e), fwd.last().unwrap());
            fwd.push(next);
        }
        let mut bwd = vec![vec![0.0; h]; n + 1];
        for i in (0..n).rev() {
            bwd[i] = self.gru("enc_bwd", &self.row("src_emb", x[i], e), &bwd[i + 1]);
        }
        let ann: Vec<Vec<f64>> = (0..n).map(|i| [fwd[i + 1].clone(), bwd[i].clone()].concat()).collect();
        let mut s: Vec<f64> = (0..h)
            .map(|k| {
                let mut a = self.w("init.b", k, 0);
                for j in 0..2 * h {
                    let mean: f64 = ann.iter().map(|a| a[j]).sum::<f64>() / n as f64;
                    a += self.w("init.W", k, j) * mean;
                }
                a.tanh()
            })
            .collect();
        let mut prev = BOS_ID;
        let mut out = Vec::new();
        for &tok in y {
            let emb = self.row("tgt_emb", prev, e);
            let s1 = self.gru("dec1", &emb, &s);
            let scores: Vec<f64> = ann
                .iter()
                .map(|a| {
                    (0..h)
                        .map(|k| {
                            let mut u = self.w("att.b", k, 0);
                            for j in 0..2 * h {
                                u += self.w("att.W", k, j) * a[j];
                            }
                            for j in 0..h {
                                u += self.w("att.U", k, j) * s1[j];
                            }
                            self.w("att.v", k, 0) * u.tanh()
                        })
                        .sum()
                })
                .collect();
            let zmax = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let zs: f64 = scores.iter().map(|a| (a - zmax).exp()).sum();
            let alpha: Vec<f64> = scores.iter().map(|a| (a - zmax).exp() / zs).collect();
            let c: Vec<f64> = (0..2 * h).map(|j| (0..n).map(|i| alpha[i] * ann[i][j]).sum()).collect();
            s = self.gru("dec2", &c, &s1);
            let t: Vec<f64> = (0..e)
                .map(|k| {
                    let mut a = self.w("readout.b", k, 0);
                    for j in 0..h {
                        a += self.w("readout.Rs", k, j) * s[j];
                    }
                    for j in 0..e {
                        a += self.w("readout.Re", k, j) * emb[j];
                    }
                    for j in 0..2 * h {
                        a += self.w("readout.Rc", k, j) * c[j];
                    }
                    a.tanh()
                })
                .collect();
            let logits: Vec<f64> = (0..v)
                .map(|o| self.w("out.b", o, 0) + (0..e).map(|k| self.w("out.W", o, k) * t[k]).sum::<f64>())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lz = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            out.push(logits[tok] - lz);
            prev = tok;
        }
        out
    }
}

fn hand_sized(seed: u64) -> Policy {
    let cfg = ModelConfig {
        hidden: 2,
        emb: 2,
        max_len: 4,
    };
    Policy::new(cfg, Vocab::from_tokens(SRC), Vocab::from_tokens(["x@0"]), seed, 0.9).unwrap()
}

#[test]
fn token_logprob_matches_scalar_oracle() {
    for seed in 0..5 {
        let p = hand_sized(seed);
        assert_eq!(p.tgt_vocab().len(), 4);
        let oracle = Oracle { p: &p };
        let x = ["a", "c", "b"];
        let xi = p.encode_source(&x);
        let y = [3, 3, EOS_ID];
        let expect = oracle.token_logprobs(&xi, &y);
        let prefixes: [&[&str]; 3] = [&[], &["x@0"], &["x@0", "x@0"]];
        let cands = ["x@0", "x@0", "</s>"];
        for j in 0..3 {
            let got = p.token_logprob(&x, prefixes[j], cands[j]).unwrap();
            assert!((got - expect[j]).abs() < 1e-12, "seed {seed} pos {j}: {got} vs {}", expect[j]);
        }
        let fwd = p.forward(&xi, &y);
        for (a, b) in fwd.token_logprobs().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn every_candidate_matches_oracle() {
    let p = hand_sized(11);
    let oracle = Oracle { p: &p };
    let x = ["b", "b"];
    let xi = p.encode_source(&x);
    for cand in 0..p.tgt_vocab().len() {
        let expect = oracle.token_logprobs(&xi, &[3, cand])[1];
        let name = p.tgt_vocab().token(cand).unwrap();
        let got = p.token_logprob(&x, &["x@0"], name).unwrap();
        assert!((got - expect).abs() < 1e-12);
    }
}

#[test]
fn sequence_logprob_is_sum_of_token_oracle() {
    let p = small_policy(4, 3, 2, 0.5);
    let oracle = Oracle { p: &p };
    let mut r = rng(9);
    for _ in 0..20 {
        let x = random_question(&mut r);
        let y = random_output(&mut r, 4);
        let lp = p.sequence_logprob(&x, &y).unwrap();
        let yi = p.encode_target(&y).unwrap();
        let sum: f64 = oracle.token_logprobs(&p.encode_source(&x), &yi).iter().sum();
        assert!((lp - sum).abs() < 1e-11);
        assert!(lp <= 0.0);
    }
}

#[test]
fn unknown_source_words_map_to_unk() {
    let p = small_policy(4, 3, 2, 0.5);
    let y: LinearQuery = "x@0".parse().unwrap();
    let a = p.sequence_logprob(&["a", "zzz"], &y).unwrap();
    let b = p.sequence_logprob(&["a", "<unk>"], &y).unwrap();
    assert_eq!(a, b);
}

#[test]
fn probability_one_softmax_has_zero_gradient() {
    let mut p = small_policy(2, 3, 2, 0.3);
    let t = *p.layout().tensors().iter().find(|t| t.name == "out.b").unwrap();
    p.params_mut()[t.offset + EOS_ID] = 1000.0;
    let xi = p.encode_source(&["a", "b"]);
    let fwd = p.forward(&xi, &[EOS_ID]);
    assert_eq!(fwd.logprob(), 0.0);
    let mut g = p.zero_grad();
    p.backward(&fwd, &[1.0], &mut g);
    assert!(g.iter().all(|v| *v == 0.0));
}

#[test]
fn backward_is_linear_in_position_coefficients() {
    let p = small_policy(6, 4, 3, 0.4);
    let xi = p.encode_source(&["c", "a"]);
    let y = [3, 5, 4, EOS_ID];
    let fwd = p.forward(&xi, &y);
    let coeffs = [0.3, -1.2, 2.0, 0.7];
    let mut whole = p.zero_grad();
    p.backward(&fwd, &coeffs, &mut whole);
    let mut parts = p.zero_grad();
    for j in 0..y.len() {
        let mut c = [0.0; 4];
        c[j] = coeffs[j];
        p.backward(&fwd, &c, &mut parts);
    }
    for (a, b) in whole.iter().zip(&parts) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn beam_one_is_greedy() {
    let mut r = rng(3);
    for seed in 0..30 {
        let p = small_policy(seed, 4, 3, 1.0);
        let x = random_question(&mut r);
        let beam = p.beam_search(&x, 1);
        let greedy = greedy_decode(&p, &x);
        assert_eq!(beam[0].ids, greedy.ids, "seed {seed}");
        assert_eq!(beam[0].finished, greedy.finished);
        assert!((beam[0].logprob - greedy.logprob).abs() < 1e-12);
    }
}

#[test]
fn wide_beam_equals_exhaustive_enumeration() {
    for seed in 0..4 {
        let cfg = ModelConfig {
            hidden: 3,
            emb: 2,
            max_len: 3,
        };
        let p = Policy::new(cfg, Vocab::from_tokens(SRC), Vocab::from_tokens(["x@0"]), seed, 1.5).unwrap();
        let x = ["a", "b"];
        let xi = p.encode_source(&x);
        let exact = common::enumerate(&p, &xi);
        // |V|^max_len bounds the number of live prefixes, so nothing is pruned.
        let beam = p.beam_search(&x, 4usize.pow(3));
        assert_eq!(beam.len(), exact.len());
        for (b, (ids, lp)) in beam.iter().zip(&exact) {
            assert!(b.finished);
            assert_eq!(&b.ids, ids);
            assert!((b.logprob - lp).abs() < 1e-12);
        }
    }
}

#[test]
fn beam_results_are_sorted_and_scored_exactly() {
    let p = small_policy(8, 4, 3, 1.0);
    let x = ["c", "c", "a"];
    let xi = p.encode_source(&x);
    let beam = p.beam_search(&x, 5);
    for w in beam.windows(2) {
        assert!(w[0].logprob >= w[1].logprob);
    }
    for h in &beam {
        let mut y = h.ids.clone();
        y.push(EOS_ID);
        assert!((p.forward(&xi, &y).logprob() - h.logprob).abs() < 1e-12);
    }
}

#[test]
fn ce_loss_decreases_on_toy_corpus() {
    let p0 = small_policy(1, 8, 4, 0.08);
    let mut r = rng(2);
    let corpus: Vec<(Vec<usize>, Vec<usize>)> = (0..10)
        .map(|_| {
            let x = random_question(&mut r);
            let y = random_output(&mut r, 3);
            (p0.encode_source(&x), p0.encode_target(&y).unwrap())
        })
        .collect();
    let mut p = p0.clone();
    let mut opt = Adadelta::new(p.params().len(), AdadeltaConfig::default());
    let before = ce_loss(&p, &corpus);
    for _ in 0..50 {
        ce_train_step(&mut p, &corpus, &mut opt, 1.0).unwrap();
    }
    let after = ce_loss(&p, &corpus);
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn fixed_seed_training_is_deterministic() {
    let run = || {
        let mut p = small_policy(5, 6, 4, 0.08);
        let batch = vec![(p.encode_source(&["a", "b"]), vec![3, 4, EOS_ID])];
        let mut opt = Adadelta::new(p.params().len(), AdadeltaConfig::default());
        for _ in 0..7 {
            ce_train_step(&mut p, &batch, &mut opt, 1.0).unwrap();
        }
        p.params().to_vec()
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_decoder_step_is_normalized(seed in 0u64..1000, plen in 0usize..5, scale in 0.01f64..3.0) {
        let p = small_policy(seed, 3, 2, scale);
        let mut r = rng(seed);
        let x = random_question(&mut r);
        let prefix: Vec<&str> = (0..plen).map(|_| TGT[r.gen_range(0..TGT.len())]).collect();
        let dist = p.next_token_logprobs(&x, &prefix).unwrap();
        let total: f64 = dist.iter().map(|l| l.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        prop_assert!(dist.iter().all(|l| l.is_finite() && *l <= 0.0));
    }

    #[test]
    fn wider_beam_never_finds_worse_top_output(seed in 0u64..500) {
        let p = small_policy(seed, 3, 2, 1.5);
        let mut r = rng(seed + 1);
        let x = random_question(&mut r);
        let mut best = f64::NEG_INFINITY;
        for k in 1..=6 {
            let top = p.beam_search(&x, k).into_iter().next().unwrap();
            if top.finished {
                prop_assert!(top.logprob >= best - 1e-12, "beam {}: {} < {}", k, top.logprob, best);
                best = top.logprob;
            }
        }
    }
}
