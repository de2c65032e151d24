use emovox_core::gradcheck::{check_gradients, GradCheckOptions};
use emovox_core::nn::{
    attention, embedding_lookup, layer_norm, lconv, scln, AttentionParams, LConvParams,
    LayerNormParams, SclnParams, TransformerBlock,
};
use emovox_core::{Error, ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() < tol, "index {i}: {x} vs {y}");
    }
}

fn standardize(row: &[f64], eps: f64) -> Vec<f64> {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
    row.iter().map(|v| (v - mean) / (var + eps).sqrt()).collect()
}

fn linear_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    let (l, din, dout) = (x.shape()[0], w.shape()[0], w.shape()[1]);
    (0..l)
        .map(|t| {
            (0..dout)
                .map(|j| b.data()[j] + (0..din).map(|i| x.at(t, i) * w.at(i, j)).sum::<f64>())
                .collect()
        })
        .collect()
}

// ---- SCLN -------------------------------------------------------------

fn scln_fixture(seed: u64) -> (ParamStore, SclnParams) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = SclnParams::new(&mut store, &mut rng, "scln", 6, 3, 0.5);
    (store, p)
}

#[test]
fn scln_with_zero_condition_is_layer_norm() {
    let (mut store, p) = scln_fixture(1);
    store.assign("scln.gain_weight", Tensor::zeros(&[6, 3])).unwrap();
    store.assign("scln.bias_weight", Tensor::zeros(&[6, 3])).unwrap();
    let ln = LayerNormParams::new(&mut store, "ln", 6);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_tensor(&mut rng, &[5, 6]);
    let s = random_tensor(&mut rng, &[3]);
    let mut tape = Tape::new(&store);
    let (xv, sv) = (tape.constant(x), tape.constant(s));
    let a = scln(&mut tape, xv, sv, &p).unwrap();
    let b = layer_norm(&mut tape, xv, &ln).unwrap();
    assert_close(tape.value(a), tape.value(b), 1e-12);
}

#[test]
fn scln_with_zero_gain_is_bias_broadcast() {
    let (mut store, p) = scln_fixture(3);
    store.assign("scln.gain_weight", Tensor::zeros(&[6, 3])).unwrap();
    store.assign("scln.gain_bias", Tensor::zeros(&[6])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_tensor(&mut rng, &[4, 6]);
    let s = random_tensor(&mut rng, &[3]);
    let bw = store.get(store.id("scln.bias_weight").unwrap()).clone();
    let bb = store.get(store.id("scln.bias_bias").unwrap()).clone();
    let beta: Vec<f64> = (0..6)
        .map(|i| bb.data()[i] + (0..3).map(|j| bw.at(i, j) * s.data()[j]).sum::<f64>())
        .collect();
    let mut tape = Tape::new(&store);
    let (xv, sv) = (tape.constant(x), tape.constant(s));
    let y = scln(&mut tape, xv, sv, &p).unwrap();
    for row in tape.value(y).chunks(6) {
        assert_close(row, &beta, 1e-12);
    }
}

#[test]
fn scln_matches_loop_oracle_and_depends_on_speaker() {
    let (mut store, p) = scln_fixture(5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    randomize(&mut store, &mut rng);
    let x = random_tensor(&mut rng, &[4, 6]);
    let speakers = [random_tensor(&mut rng, &[3]), random_tensor(&mut rng, &[3])];
    let get = |n: &str| store.get(store.id(n).unwrap()).clone();
    let (gw, gb, bw, bb) = (
        get("scln.gain_weight"),
        get("scln.gain_bias"),
        get("scln.bias_weight"),
        get("scln.bias_bias"),
    );
    let mut outputs = Vec::new();
    for s in &speakers {
        let affine = |w: &Tensor, b: &Tensor| -> Vec<f64> {
            (0..6)
                .map(|i| b.data()[i] + (0..3).map(|j| w.at(i, j) * s.data()[j]).sum::<f64>())
                .collect()
        };
        let (gamma, beta) = (affine(&gw, &gb), affine(&bw, &bb));
        let mut expected = Vec::new();
        for t in 0..4 {
            let xhat = standardize(x.row(t), 1e-5);
            expected.extend((0..6).map(|i| gamma[i] * xhat[i] + beta[i]));
        }
        let mut tape = Tape::new(&store);
        let (xv, sv) = (tape.constant(x.clone()), tape.constant(s.clone()));
        let y = scln(&mut tape, xv, sv, &p).unwrap();
        assert_close(tape.value(y), &expected, 1e-12);
        outputs.push(tape.value(y).to_vec());
    }
    assert_ne!(outputs[0], outputs[1]);
}

#[test]
fn scln_gradients_including_speaker_embedding() {
    let (mut store, p) = scln_fixture(7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    randomize(&mut store, &mut rng);
    let x = store.register("x", random_tensor(&mut rng, &[3, 6]));
    let s = store.register("s", random_tensor(&mut rng, &[3]));
    let r = random_tensor(&mut rng, &[3, 6]);
    let res = check_gradients(
        &mut store,
        |t| {
            let (xv, sv) = (t.param(x), t.param(s));
            let y = scln(t, xv, sv, &p)?;
            let rv = t.constant(r.clone());
            let y = t.mul(y, rv)?;
            Ok(t.sum_all(y))
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(res.passes(1e-4), "{res:?}");
}

// ---- LConv ------------------------------------------------------------

fn lconv_fixture(seed: u64, d: usize, heads: usize, k: usize) -> (ParamStore, LConvParams) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = LConvParams::new(&mut store, &mut rng, "lconv", d, heads, k).unwrap();
    (store, p)
}

/// Identity projections and a gate pinned open.
fn make_transparent(store: &mut ParamStore, d: usize) {
    let mut w = Tensor::zeros(&[d, 2 * d]);
    for i in 0..d {
        w.data_mut()[i * 2 * d + i] = 1.0;
    }
    store.assign("lconv.in_proj.weight", w).unwrap();
    let mut b = vec![0.0; 2 * d];
    b[d..].iter_mut().for_each(|v| *v = 60.0);
    store.assign("lconv.in_proj.bias", Tensor::vector(b)).unwrap();
    store.assign("lconv.out_proj.weight", Tensor::identity(d)).unwrap();
    store.assign("lconv.out_proj.bias", Tensor::zeros(&[d])).unwrap();
}

#[test]
fn uniform_kernel_is_moving_average() {
    let (l, d) = (5, 4);
    let (mut store, p) = lconv_fixture(10, d, 2, 3);
    make_transparent(&mut store, d);
    store.assign("lconv.kernel_logits", Tensor::zeros(&[2, 3])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_tensor(&mut rng, &[l, d]);
    let mut expected = Vec::new();
    for t in 0..l {
        for c in 0..d {
            let prev = if t > 0 { x.at(t - 1, c) } else { 0.0 };
            let next = if t + 1 < l { x.at(t + 1, c) } else { 0.0 };
            expected.push((prev + x.at(t, c) + next) / 3.0);
        }
    }
    let mut tape = Tape::new(&store);
    let xv = tape.constant(x);
    let y = lconv(&mut tape, xv, &p).unwrap();
    assert_close(tape.value(y), &expected, 1e-12);
}

#[test]
fn delta_kernel_is_temporal_identity() {
    let (l, d) = (6, 4);
    let (mut store, p) = lconv_fixture(12, d, 4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    randomize(&mut store, &mut rng);
    let mut logits = Tensor::zeros(&[4, 3]);
    for h in 0..4 {
        logits.data_mut()[h * 3 + 1] = 200.0;
    }
    store.assign("lconv.kernel_logits", logits).unwrap();
    let x = random_tensor(&mut rng, &[l, d]);

    let get = |n: &str| store.get(store.id(n).unwrap()).clone();
    let h = linear_oracle(&x, &get("lconv.in_proj.weight"), &get("lconv.in_proj.bias"));
    let glu: Vec<f64> = h
        .iter()
        .flat_map(|row| (0..d).map(move |c| row[c] / (1.0 + (-row[d + c]).exp())))
        .collect();
    let glu = Tensor::new(vec![l, d], glu).unwrap();
    let expected = linear_oracle(&glu, &get("lconv.out_proj.weight"), &get("lconv.out_proj.bias"));

    let mut tape = Tape::new(&store);
    let xv = tape.constant(x);
    let y = lconv(&mut tape, xv, &p).unwrap();
    assert_close(tape.value(y), &expected.concat(), 1e-12);
}

#[test]
fn lconv_matches_sliding_window_oracle() {
    let (l, d, k, heads) = (6, 4, 3, 2);
    let (mut store, p) = lconv_fixture(14, d, heads, k);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    randomize(&mut store, &mut rng);
    let x = random_tensor(&mut rng, &[l, d]);
    let get = |n: &str| store.get(store.id(n).unwrap()).clone();

    let h = linear_oracle(&x, &get("lconv.in_proj.weight"), &get("lconv.in_proj.bias"));
    let glu: Vec<Vec<f64>> = h
        .iter()
        .map(|row| (0..d).map(|c| row[c] / (1.0 + (-row[d + c]).exp())).collect())
        .collect();
    let logits = get("lconv.kernel_logits");
    let kernel: Vec<Vec<f64>> = (0..heads)
        .map(|hd| {
            let row = logits.row(hd);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            row.iter().map(|v| v.exp() / z).collect()
        })
        .collect();
    let mut conv = vec![0.0; l * d];
    for t in 0..l {
        for c in 0..d {
            let head = c / (d / heads);
            for (j, w) in kernel[head].iter().enumerate() {
                let src = t as isize + j as isize - (k / 2) as isize;
                if (0..l as isize).contains(&src) {
                    conv[t * d + c] += w * glu[src as usize][c];
                }
            }
        }
    }
    let conv = Tensor::new(vec![l, d], conv).unwrap();
    let expected = linear_oracle(&conv, &get("lconv.out_proj.weight"), &get("lconv.out_proj.bias"));

    let mut tape = Tape::new(&store);
    let xv = tape.constant(x);
    let y = lconv(&mut tape, xv, &p).unwrap();
    assert_close(tape.value(y), &expected.concat(), 1e-12);
}

#[test]
fn lconv_kernel_weights_on_simplex() {
    let (store, p) = lconv_fixture(16, 8, 4, 3);
    let mut tape = Tape::new(&store);
    let logits = tape.param(p.kernel_logits);
    let k = tape.softmax(logits);
    for row in tape.value(k).chunks(3) {
        assert!(row.iter().all(|&v| v >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn lconv_rejects_even_kernel() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        LConvParams::new(&mut store, &mut rng, "c", 8, 4, 4),
        Err(Error::Config(_))
    ));
}

#[test]
fn lconv_gradients_including_kernel_logits() {
    let (mut store, p) = lconv_fixture(17, 4, 2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    randomize(&mut store, &mut rng);
    let x = store.register("x", random_tensor(&mut rng, &[5, 4]));
    let r = random_tensor(&mut rng, &[5, 4]);
    let res = check_gradients(
        &mut store,
        |t| {
            let xv = t.param(x);
            let y = lconv(t, xv, &p)?;
            let rv = t.constant(r.clone());
            let y = t.mul(y, rv)?;
            Ok(t.sum_all(y))
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(res.passes(1e-4), "{res:?}");
}

// ---- attention --------------------------------------------------------

fn attention_fixture(seed: u64, d: usize, heads: usize) -> (ParamStore, AttentionParams) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = AttentionParams::new(&mut store, &mut rng, "attn", d, d, d, heads).unwrap();
    (store, p)
}

#[test]
fn equal_scores_give_uniform_weights_and_mean_context() {
    let (store, p) = attention_fixture(20, 4, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let keys = random_tensor(&mut rng, &[5, 4]);
    let mean: Vec<f64> = (0..4).map(|j| (0..5).map(|i| keys.at(i, j)).sum::<f64>() / 5.0).collect();
    let mut tape = Tape::new(&store);
    // A zero query scores every key 0.
    let q = tape.constant(Tensor::zeros(&[4]));
    let k = tape.constant(keys);
    let out = attention(&mut tape, q, k, &p).unwrap();
    assert_close(tape.value(out.weights), &[0.2; 5], 1e-15);
    assert_close(tape.value(out.context), &mean, 1e-12);
}

#[test]
fn single_key_gets_all_weight() {
    let (store, p) = attention_fixture(22, 4, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let key = random_tensor(&mut rng, &[1, 4]);
    let mut tape = Tape::new(&store);
    let q = tape.constant(random_tensor(&mut rng, &[4]));
    let k = tape.constant(key.clone());
    let out = attention(&mut tape, q, k, &p).unwrap();
    assert_eq!(tape.value(out.weights), &[1.0]);
    assert_close(tape.value(out.context), key.data(), 1e-15);
}

#[test]
fn attention_weights_match_closed_form() {
    let (n, d) = (7, 8);
    let (store, p) = attention_fixture(24, d, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let q = random_tensor(&mut rng, &[d]);
    let keys = random_tensor(&mut rng, &[n, d]);
    let wq = store.get(p.query).clone();
    let wk = store.get(p.key).clone();
    let pq: Vec<f64> = (0..d).map(|j| (0..d).map(|i| q.data()[i] * wq.at(i, j)).sum()).collect();
    let scores: Vec<f64> = (0..n)
        .map(|r| {
            let pk: Vec<f64> = (0..d).map(|j| (0..d).map(|i| keys.at(r, i) * wk.at(i, j)).sum()).collect();
            pq.iter().zip(&pk).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()
        })
        .collect();
    let z: f64 = scores.iter().map(|s| s.exp()).sum();
    let expected: Vec<f64> = scores.iter().map(|s| s.exp() / z).collect();

    let mut tape = Tape::new(&store);
    let (qv, kv) = (tape.constant(q), tape.constant(keys));
    let out = attention(&mut tape, qv, kv, &p).unwrap();
    assert_close(tape.value(out.weights), &expected, 1e-12);
    assert!((tape.value(out.weights).iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn attention_gradients_single_and_multi_head() {
    for heads in [1, 2] {
        let (mut store, p) = attention_fixture(26 + heads as u64, 4, heads);
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let q = store.register("q", random_tensor(&mut rng, &[4]));
        let k = store.register("k", random_tensor(&mut rng, &[5, 4]));
        let r = random_tensor(&mut rng, &[4]);
        let r2 = random_tensor(&mut rng, &[5]);
        let res = check_gradients(
            &mut store,
            |t| {
                let (qv, kv) = (t.param(q), t.param(k));
                let out = attention(t, qv, kv, &p)?;
                let rv = t.constant(r.clone());
                let c = t.mul(out.context, rv)?;
                let r2v = t.constant(r2.clone());
                let w = t.mul(out.weights, r2v)?;
                let (c, w) = (t.sum_all(c), t.sum_all(w));
                t.add(c, w)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(res.passes(1e-4), "heads={heads}: {res:?}");
    }
}

// ---- transformer block -----------------------------------------------

fn block_fixture(seed: u64, d: usize) -> (ParamStore, TransformerBlock) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = TransformerBlock::new(&mut store, &mut rng, "block", d, 4).unwrap();
    (store, b)
}

#[test]
fn transformer_block_preserves_shape() {
    let (store, block) = block_fixture(40, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for l in [1, 5, 40] {
        let mut tape = Tape::new(&store);
        let x = tape.constant(random_tensor(&mut rng, &[l, 8]));
        let y = block.forward(&mut tape, x).unwrap();
        assert_eq!(tape.shape(y), &[l, 8]);
    }
}

#[test]
fn zeroed_output_projections_make_block_identity() {
    let (mut store, block) = block_fixture(42, 8);
    for name in ["block.attn.out", "block.ff.out"] {
        let w = store.id(&format!("{name}.weight")).unwrap();
        let shape = store.get(w).shape().to_vec();
        store.assign(&format!("{name}.weight"), Tensor::zeros(&shape)).unwrap();
        store.assign(&format!("{name}.bias"), Tensor::zeros(&[8])).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let x = random_tensor(&mut rng, &[5, 8]);
    let mut tape = Tape::new(&store);
    let xv = tape.constant(x.clone());
    let y = block.forward(&mut tape, xv).unwrap();
    assert_eq!(tape.value(y), x.data());
}

#[test]
fn transformer_block_gradients() {
    let (mut store, block) = block_fixture(44, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let x = store.register("x", random_tensor(&mut rng, &[4, 8]));
    let r = random_tensor(&mut rng, &[4, 8]);
    let res = check_gradients(
        &mut store,
        |t| {
            let xv = t.param(x);
            let y = block.forward(t, xv)?;
            let rv = t.constant(r.clone());
            let y = t.mul(y, rv)?;
            Ok(t.sum_all(y))
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(res.passes(1e-4), "{res:?}");
}

#[test]
fn doubling_length_only_changes_time_axis() {
    let (store, block) = block_fixture(46, 8);
    let (lstore, lc) = lconv_fixture(47, 8, 4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(48);
    for l in [3, 6] {
        let x = random_tensor(&mut rng, &[l, 8]);
        let mut tape = Tape::new(&store);
        let xv = tape.constant(x.clone());
        let y = block.forward(&mut tape, xv).unwrap();
        assert_eq!(tape.shape(y), &[l, 8]);
        let mut tape = Tape::new(&lstore);
        let xv = tape.constant(x);
        let y = lconv(&mut tape, xv, &lc).unwrap();
        assert_eq!(tape.shape(y), &[l, 8]);
    }
}

// ---- embeddings -------------------------------------------------------

#[test]
fn embedding_lookup_gathers_and_accumulates() {
    let mut store = ParamStore::new();
    let table = store.register(
        "table",
        Tensor::from_rows(&[vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, 5.0]]).unwrap(),
    );
    let mut tape = Tape::new(&store);
    let r0 = embedding_lookup(&mut tape, &[0], table).unwrap();
    assert_eq!(tape.value(r0), &[0.0, 1.0]);

    let mut tape = Tape::new(&store);
    let rr = embedding_lookup(&mut tape, &[2, 2], table).unwrap();
    assert_eq!(tape.value(rr), &[4.0, 5.0, 4.0, 5.0]);
    let loss = tape.sum_all(rr);
    tape.backward(loss).unwrap();
    assert_eq!(tape.param_grad(table).unwrap(), &[0.0, 0.0, 0.0, 0.0, 2.0, 2.0]);

    let mut tape = Tape::new(&store);
    assert_eq!(
        embedding_lookup(&mut tape, &[5], table).unwrap_err(),
        Error::Index {
            what: "embedding id",
            index: 5,
            bound: 3
        }
    );
}

proptest! {
    #[test]
    fn attention_weights_always_on_simplex(seed in 0u64..500, n in 1usize..10, scale in 0.1f64..50.0) {
        let (store, p) = attention_fixture(seed, 4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let q: Vec<f64> = (0..4).map(|_| rng.random_range(-scale..scale)).collect();
        let mut tape = Tape::new(&store);
        let qv = tape.constant(Tensor::vector(q));
        let kv = tape.constant(random_tensor(&mut rng, &[n, 4]));
        let out = attention(&mut tape, qv, kv, &p).unwrap();
        let w = tape.value(out.weights);
        prop_assert!(w.iter().all(|&v| v >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn positions_bounded(l in 1usize..64, half in 1usize..32) {
        let pe = emovox_core::nn::sinusoidal_positions(l, 2 * half).unwrap();
        prop_assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
