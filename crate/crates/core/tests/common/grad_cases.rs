//! Finite-difference gradient cases for every differentiable op and block.
//! Each case builds a scalar by projecting the op output onto a fixed random
//! matrix, so every output element contributes to the gradient.

use std::rc::Rc;

use nepqa_core::nn::layers::{embed, init_layer_norm, init_linear, layer_norm, linear, MultiHeadAttention};
use nepqa_core::nn::{
    positional_encoding, scaled_dot_product_attention, AttentionConfig, BlockDims, DecoderLayer,
    EncoderLayer, ForwardMode, Graph, Mask, NnError, ParamStore, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Loss = Box<dyn Fn(&mut Graph, &ParamStore) -> Result<Var, NnError>>;

pub struct Case {
    pub name: String,
    pub store: ParamStore,
    pub loss: Loss,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// `sum(out ⊙ R)` with a fixed `R` drawn from `seed`.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var, NnError> {
    let shape = g.value(out).shape().to_vec();
    let r = rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &shape);
    let r = g.input(r);
    let m = g.mul(out, r)?;
    Ok(g.sum(m))
}

fn case(name: &str, store: ParamStore, loss: impl Fn(&mut Graph, &ParamStore) -> Result<Var, NnError> + 'static) -> Case {
    Case {
        name: name.to_owned(),
        store,
        loss: Box::new(loss),
    }
}

/// All cases for one seed; dimensions stay at or below 32.
pub fn cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.gen_range(1..=4usize);
    let n = rng.gen_range(2..=5usize);
    let heads = if rng.gen_bool(0.5) { 1 } else { 2 };
    let d = 4 * heads;
    let ps = seed.wrapping_mul(31).wrapping_add(1);
    let mut out = Vec::new();

    let mut s = ParamStore::new();
    s.insert("a", rand_tensor(&mut rng, &[m, n]));
    s.insert("b", rand_tensor(&mut rng, &[n, 3]));
    s.insert("c", rand_tensor(&mut rng, &[m, n]));
    s.insert("v", rand_tensor(&mut rng, &[n]));
    out.push(case("elementwise", s, move |g, st| {
        let a = g.param(st, "a")?;
        let b = g.param(st, "b")?;
        let c = g.param(st, "c")?;
        let v = g.param(st, "v")?;
        let ab = g.matmul(a, b)?;
        let at = g.transpose(a)?;
        let att = g.transpose(at)?;
        let sum = g.add(att, c)?;
        let prod = g.mul(sum, c)?;
        let shifted = g.add_row(prod, v)?;
        let scaled = g.scale(shifted, 0.7);
        let act = g.gelu(scaled);
        let l1 = project(g, ab, ps)?;
        let l2 = project(g, act, ps + 1)?;
        let l = g.add(l1, l2)?;
        let half = g.scale(l, 0.5);
        Ok(half)
    }));

    let mut s = ParamStore::new();
    s.insert("x", rand_tensor(&mut rng, &[m, n]));
    out.push(case("softmax", s, move |g, st| {
        let x = g.param(st, "x")?;
        let r = g.softmax(x, 1)?;
        let c = g.softmax(x, 0)?;
        let l1 = project(g, r, ps)?;
        let l2 = project(g, c, ps + 1)?;
        g.add(l1, l2)
    }));

    let mut s = ParamStore::new();
    s.insert("x", rand_tensor(&mut rng, &[n, n]));
    out.push(case("masked_softmax", s, move |g, st| {
        let x = g.param(st, "x")?;
        let y = g.masked_softmax(x, Rc::new(Mask::causal(n)))?;
        project(g, y, ps)
    }));

    let mut s = ParamStore::new();
    s.insert("x", rand_tensor(&mut rng, &[m, d]));
    s.insert("ln.gain", rand_tensor(&mut rng, &[d]));
    s.insert("ln.bias", rand_tensor(&mut rng, &[d]));
    out.push(case("layer_norm", s, move |g, st| {
        let x = g.param(st, "x")?;
        let y = layer_norm(g, st, "ln", x)?;
        project(g, y, ps)
    }));

    let mut s = ParamStore::new();
    s.insert("table", rand_tensor(&mut rng, &[6, d]));
    let ids: Vec<usize> = (0..n).map(|_| rng.gen_range(0..6)).collect();
    let pe = positional_encoding(8, d).unwrap();
    out.push(case("embedding", s, move |g, st| {
        let e = embed(g, st, "table", &ids, &pe)?;
        project(g, e, ps)
    }));

    let mut s = ParamStore::new();
    s.insert("x", rand_tensor(&mut rng, &[n, 6]));
    out.push(case("slice_concat_mean", s, move |g, st| {
        let x = g.param(st, "x")?;
        let l = g.slice_cols(x, 0, 2)?;
        let r = g.slice_cols(x, 2, 6)?;
        let joined = g.concat_cols(&[r, l])?;
        let stacked = g.concat_rows(&[joined, x])?;
        let mean = g.mean_rows(stacked, &[0, n, n + 1.min(n - 1)])?;
        let relu = g.relu(x);
        let l1 = project(g, mean, ps)?;
        let l2 = project(g, relu, ps + 1)?;
        g.add(l1, l2)
    }));

    let mut s = ParamStore::new();
    s.insert("z", rand_tensor(&mut rng, &[n, 5]));
    let targets: Vec<usize> = (0..n).map(|i| if i == 0 { 0 } else { rng.gen_range(0..5) }).collect();
    out.push(case("cross_entropy", s, move |g, st| {
        let z = g.param(st, "z")?;
        g.cross_entropy(z, &targets, Some(0))
            .or_else(|_| g.cross_entropy(z, &targets, None))
    }));

    let mut s = ParamStore::new();
    s.insert("q", rand_tensor(&mut rng, &[m, d]));
    s.insert("k", rand_tensor(&mut rng, &[n, d]));
    s.insert("v", rand_tensor(&mut rng, &[n, d]));
    let mut valid: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
    valid[0] = true;
    out.push(case("attention", s, move |g, st| {
        let q = g.param(st, "q")?;
        let k = g.param(st, "k")?;
        let v = g.param(st, "v")?;
        let a = scaled_dot_product_attention(g, q, k, v, None)?;
        let b = scaled_dot_product_attention(g, q, k, v, Some(Rc::new(Mask::keys(m, &valid))))?;
        let l1 = project(g, a, ps)?;
        let l2 = project(g, b, ps + 1)?;
        g.add(l1, l2)
    }));

    let cfg = AttentionConfig::new(d, heads).unwrap();
    let mut s = ParamStore::new();
    s.insert("x", rand_tensor(&mut rng, &[n, d]));
    let mha = MultiHeadAttention::new("mha", cfg);
    mha.init(&mut s, &mut rng);
    init_linear(&mut s, "proj", d, 3, &mut rng);
    out.push(case("multi_head_attention", s, move |g, st| {
        let x = g.param(st, "x")?;
        let y = mha.forward(g, st, x, x, Some(Rc::new(Mask::causal(n))))?;
        let y = linear(g, st, "proj", y)?;
        project(g, y, ps)
    }));

    let dims = BlockDims {
        attention: cfg,
        d_ff: 2 * d,
    };
    let mut s = ParamStore::new();
    s.insert("x", rand_tensor(&mut rng, &[n, d]));
    let enc = EncoderLayer::new("enc", dims);
    enc.init(&mut s, &mut rng);
    perturb_norms(&mut s, &mut rng);
    out.push(case("encoder_block", s, move |g, st| {
        let x = g.param(st, "x")?;
        let y = enc.forward(g, st, x, None, &mut ForwardMode::Eval)?;
        project(g, y, ps)
    }));

    let mut s = ParamStore::new();
    s.insert("x", rand_tensor(&mut rng, &[m, d]));
    s.insert("mem", rand_tensor(&mut rng, &[n, d]));
    let dec = DecoderLayer::new("dec", dims);
    dec.init(&mut s, &mut rng);
    perturb_norms(&mut s, &mut rng);
    let mut mem_valid: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
    mem_valid[n - 1] = true;
    out.push(case("decoder_block", s, move |g, st| {
        let x = g.param(st, "x")?;
        let mem = g.param(st, "mem")?;
        let cross = Rc::new(Mask::keys(m, &mem_valid));
        let y = dec.forward(g, st, x, mem, Rc::new(Mask::causal(m)), Some(cross), &mut ForwardMode::Eval)?;
        project(g, y, ps)
    }));

    let mut s = ParamStore::new();
    s.insert("x", rand_tensor(&mut rng, &[n, d]));
    init_layer_norm(&mut s, "norm", d);
    out.push(case("dropout_fixed_mask", s, move |g, st| {
        let x = g.param(st, "x")?;
        let mut mode = ForwardMode::Train {
            dropout: 0.3,
            rng: ChaCha8Rng::seed_from_u64(ps),
        };
        let y = mode.dropout(g, x)?;
        let y = layer_norm(g, st, "norm", y)?;
        project(g, y, ps)
    }));

    out
}

/// Moves layer-norm gains and biases off their identity initialization so
/// their gradients are exercised in general position.
fn perturb_norms(s: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = s
        .names()
        .filter(|n| n.ends_with(".gain") || n.ends_with(".bias"))
        .cloned()
        .collect();
    for name in names {
        for v in s.get_mut(&name).unwrap().data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
}
