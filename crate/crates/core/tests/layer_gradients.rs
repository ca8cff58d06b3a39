use plug_core::decoder::{DecoderConfig, MaskDecoder};
use plug_core::encoder::{AdapterBank, Encoder, EncoderConfig};
use plug_core::nn::{Attention, LayerNorm, LoraPair, Params, TConv2x2};
use plug_core::prompt::PromptEncoder;
use plug_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

/// Relative error with an absolute allowance for finite-difference noise on
/// gradients that vanish identically.
fn rel(a: f64, n: f64) -> f64 {
    ((a - n).abs() - 1e-8).max(0.0) / a.abs().max(n.abs()).max(1e-12)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Checks `grad` against central differences of `f` at every coordinate of `x`.
fn check_input(name: &str, x: &[f64], grad: &[f64], f: &dyn Fn(&[f64]) -> f64) {
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut p = x.to_vec();
        p[i] += H;
        let mut m = x.to_vec();
        m[i] -= H;
        let n = (f(&p) - f(&m)) / (2.0 * H);
        worst = worst.max(rel(grad[i], n));
    }
    assert!(worst < 1e-5, "{name}: worst relative error {worst:e}");
}

fn check_params<M: Params<f64> + Clone>(name: &str, model: &M, grads: &M, f: &dyn Fn(&M) -> f64) {
    let g = grads.named("");
    for (k, (pname, t)) in model.named("").iter().enumerate() {
        let mut worst: f64 = 0.0;
        for i in 0..t.numel().min(40) {
            let eval = |d: f64| {
                let mut m = model.clone();
                m.named_mut("")[k].1.data_mut()[i] += d;
                f(&m)
            };
            let n = (eval(H) - eval(-H)) / (2.0 * H);
            worst = worst.max(rel(g[k].1.data()[i], n));
        }
        assert!(worst < 1e-5, "{name}.{pname}: worst relative error {worst:e}");
    }
}

#[test]
fn attention_with_adapters() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (d, nq, nk) = (8, 3, 5);
    let att = Attention::<f64>::new(d, 2, &mut rng);
    let mut aq = LoraPair::<f64>::new(d, d, 2, &mut rng);
    let mut av = LoraPair::<f64>::new(d, d, 2, &mut rng);
    aq.b = Tensor::randn(&[d, 2], 0.5, &mut rng);
    av.b = Tensor::randn(&[d, 2], 0.5, &mut rng);
    let xq = Tensor::<f64>::randn(&[nq, d], 1.0, &mut rng).into_vec();
    let xk = Tensor::<f64>::randn(&[nk, d], 1.0, &mut rng).into_vec();
    let xv = Tensor::<f64>::randn(&[nk, d], 1.0, &mut rng).into_vec();
    let w = Tensor::<f64>::randn(&[nq, d], 1.0, &mut rng).into_vec();
    let loss = |a: &Attention<f64>, q: &[f64], k: &[f64], v: &[f64], ad: (&LoraPair<f64>, &LoraPair<f64>)| {
        dot(&a.forward(q, nq, k, v, nk, Some(ad)).0, &w)
    };
    let (_, cache) = att.forward(&xq, nq, &xk, &xv, nk, Some((&aq, &av)));
    let mut g = att.clone();
    g.zero_();
    let mut gq = aq.clone();
    gq.zero_();
    let mut gv = av.clone();
    gv.zero_();
    let (dxq, dxk, dxv) = att.backward(&cache, &w, Some(&mut g), Some((&aq, &av)), Some((&mut gq, &mut gv)));
    check_input("xq", &xq, &dxq, &|x| loss(&att, x, &xk, &xv, (&aq, &av)));
    check_input("xk", &xk, &dxk, &|x| loss(&att, &xq, x, &xv, (&aq, &av)));
    check_input("xv", &xv, &dxv, &|x| loss(&att, &xq, &xk, x, (&aq, &av)));
    check_params("attn", &att, &g, &|a| loss(a, &xq, &xk, &xv, (&aq, &av)));
    check_params("lora_q", &aq, &gq, &|p| loss(&att, &xq, &xk, &xv, (p, &av)));
    check_params("lora_v", &av, &gv, &|p| loss(&att, &xq, &xk, &xv, (&aq, p)));
}

#[test]
fn layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ln = LayerNorm::<f64>::new(6);
    ln.g = Tensor::randn(&[6], 1.0, &mut rng);
    ln.b = Tensor::randn(&[6], 1.0, &mut rng);
    let x = Tensor::<f64>::randn(&[4, 6], 1.0, &mut rng).into_vec();
    let w = Tensor::<f64>::randn(&[4, 6], 1.0, &mut rng).into_vec();
    let (_, c) = ln.forward(&x, 4);
    let mut g = ln.clone();
    g.zero_();
    let dx = ln.backward(&c, &w, Some(&mut g));
    check_input("x", &x, &dx, &|x| dot(&ln.forward(x, 4).0, &w));
    check_params("ln", &ln, &g, &|l| dot(&l.forward(&x, 4).0, &w));
}

#[test]
fn transposed_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut t = TConv2x2::<f64>::new(4, 3, &mut rng);
    t.b = Tensor::randn(&[3], 1.0, &mut rng);
    let x = Tensor::<f64>::randn(&[4, 2, 3], 1.0, &mut rng).into_vec();
    let w = Tensor::<f64>::randn(&[3, 4, 6], 1.0, &mut rng).into_vec();
    let mut g = t.clone();
    g.zero_();
    let dx = t.backward(&x, &w, 2, 3, Some(&mut g));
    check_input("x", &x, &dx, &|x| dot(&t.forward(x, 2, 3), &w));
    check_params("tconv", &t, &g, &|m| dot(&m.forward(&x, 2, 3), &w));
}

#[test]
fn mask_decoder() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (d, grid, size) = (16, 2, 16);
    let dec = MaskDecoder::<f64>::new(d, 2, grid, size, &DecoderConfig::default(), &mut rng);
    let pe = PromptEncoder::<f64>::new(d, &mut rng);
    let ipe = pe.image_pe(grid);
    let emb = Tensor::<f64>::randn(&[grid * grid, d], 1.0, &mut rng).into_vec();
    let prompt = Tensor::<f64>::randn(&[2, d], 1.0, &mut rng).into_vec();
    let w = Tensor::<f64>::randn(&[size, size], 1.0, &mut rng).into_vec();
    let (_, c) = dec.forward(&emb, &prompt, &ipe).unwrap();
    let mut g = dec.clone();
    g.zero_();
    let (de, dp) = dec.backward(&c, &w, Some(&mut g));
    let f = |m: &MaskDecoder<f64>, e: &[f64], p: &[f64]| dot(&m.forward(e, p, &ipe).unwrap().0, &w);
    check_params("dec", &dec, &g, &|m| f(m, &emb, &prompt));
    check_input("prompt", &prompt, &dp, &|x| f(&dec, &emb, x));
    check_input("emb", &emb, &de, &|x| f(&dec, x, &prompt));
}

#[test]
fn encoder_with_adapters() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = EncoderConfig {
        image_size: 8,
        patch_size: 4,
        embed_dim: 8,
        blocks: 2,
        heads: 2,
        mlp_ratio: 2,
        rank: 2,
    };
    let enc = Encoder::<f64>::new(&cfg, &mut rng);
    let mut bank = AdapterBank::<f64>::new(&cfg, &mut rng);
    for (n, t) in bank.named_mut("") {
        if n.ends_with('B') {
            *t = Tensor::randn(t.shape(), 0.5, &mut rng);
        }
    }
    let img = Tensor::<f64>::randn(&[3, 8, 8], 1.0, &mut rng).into_vec();
    let w = Tensor::<f64>::randn(&[4, 8], 1.0, &mut rng).into_vec();
    let (_, c) = enc.forward(&img, Some(&bank)).unwrap();
    let mut g = enc.clone();
    g.zero_();
    let mut gb = bank.clone();
    gb.zero_();
    enc.backward(&c, &w, Some(&mut g), Some(&bank), Some(&mut gb));
    check_params("enc", &enc, &g, &|e| dot(&e.forward(&img, Some(&bank)).unwrap().0, &w));
    check_params("lora", &bank, &gb, &|b| dot(&enc.forward(&img, Some(b)).unwrap().0, &w));
}
