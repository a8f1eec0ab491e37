use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsal_core::encoders::{EncoderConfig, FeatureBundle, ToyEncoder};
use tsal_core::geometry::{spherical_gaussian_smooth, ErpFrameSequence, ErpGrid, FixationMap, SaliencyMap, SphPoint};
use tsal_core::model::{
    apply_relevance, bind_params, downsample, last_frame_nhwc, sim_est, train, Attention, Head, Model, ModelConfig,
    ModelError, ModelSpec, Net, PreparedInputs, Sample, TrainConfig,
};
use tsal_core::tensor::{AdamWConfig, Graph, Tensor};

type Params = BTreeMap<String, Tensor<f64>>;

// ------------------------------------------------------------------ oracles

fn lin(x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), cin);
    (0..cout)
        .map(|j| b.data()[j] + (0..cin).map(|i| x[i] * w.data()[i * cout + j]).sum::<f64>())
        .collect()
}

fn ln(x: &[f64], p: &Params, prefix: &str) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    let (g, b) = (&p[&format!("{prefix}.g")], &p[&format!("{prefix}.b")]);
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mu) / (var + 1e-5).sqrt() * g.data()[i] + b.data()[i])
        .collect()
}

fn mha(p: &Params, prefix: &str, xq: &[Vec<f64>], xkv: &[Vec<f64>], heads: usize) -> Vec<Vec<f64>> {
    let w = |n: &str| &p[&format!("{prefix}.{n}")];
    let q: Vec<Vec<f64>> = xq.iter().map(|x| lin(x, w("wq"), w("bq"))).collect();
    let k: Vec<Vec<f64>> = xkv.iter().map(|x| lin(x, w("wk"), w("bk"))).collect();
    let v: Vec<Vec<f64>> = xkv.iter().map(|x| lin(x, w("wv"), w("bv"))).collect();
    let c = q[0].len();
    let dk = c / heads;
    let mut out = Vec::new();
    for qi in &q {
        let mut ctx = vec![0.0; c];
        for h in 0..heads {
            let r = h * dk..(h + 1) * dk;
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| qi[r.clone()].iter().zip(&kj[r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for (j, vj) in v.iter().enumerate() {
                for d in r.clone() {
                    ctx[d] += e[j] / z * vj[d];
                }
            }
        }
        out.push(lin(&ctx, w("wo"), w("bo")));
    }
    out
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// `x: [f][t] -> row`.
type Grid3 = Vec<Vec<Vec<f64>>>;

fn temporal_oracle(p: &Params, m: usize, x: &Grid3, heads: usize) -> Grid3 {
    let (f, t) = (x.len(), x[0].len());
    let mut out = x.clone();
    for ti in 0..t {
        let seq: Vec<Vec<f64>> = (0..f).map(|fi| ln(&x[fi][ti], p, &format!("s{m}.tln"))).collect();
        let a = mha(p, &format!("s{m}.tattn"), &seq, &seq, heads);
        for fi in 0..f {
            out[fi][ti] = add(&x[fi][ti], &a[fi]);
        }
    }
    out
}

fn spatial_oracle(p: &Params, m: usize, x: &Grid3, heads: usize) -> Grid3 {
    x.iter()
        .map(|frame| {
            let seq: Vec<Vec<f64>> = frame.iter().map(|r| ln(r, p, &format!("s{m}.sln"))).collect();
            let a = mha(p, &format!("s{m}.sattn"), &seq, &seq, heads);
            frame.iter().zip(&a).map(|(r, d)| add(r, d)).collect()
        })
        .collect()
}

fn cross_oracle(p: &Params, m: usize, x: &Grid3, text: &[Vec<f64>], heads: usize) -> Grid3 {
    x.iter()
        .map(|frame| {
            let q: Vec<Vec<f64>> = frame.iter().map(|r| ln(r, p, &format!("s{m}.xln"))).collect();
            let a = mha(p, &format!("s{m}.xattn"), &q, text, heads);
            frame.iter().zip(&a).map(|(r, d)| add(r, d)).collect()
        })
        .collect()
}

fn ffn_oracle(p: &Params, m: usize, x: &Grid3) -> Grid3 {
    let w = |n: &str| &p[&format!("s{m}.ffn.{n}")];
    x.iter()
        .map(|frame| {
            frame
                .iter()
                .map(|r| {
                    let h: Vec<f64> = lin(&ln(r, p, &format!("s{m}.fln")), w("w1"), w("b1"))
                        .into_iter()
                        .map(|v| v.max(0.0))
                        .collect();
                    add(r, &lin(&h, w("w2"), w("b2")))
                })
                .collect()
        })
        .collect()
}

fn block_oracle(p: &Params, m: usize, vd: &Grid3, text: Option<&[Vec<f64>]>, heads: usize) -> Grid3 {
    let emb = |name: &str, i: usize| -> Vec<f64> {
        let t = &p[&format!("s{m}.{name}")];
        let c = t.shape()[1];
        t.data()[i * c..(i + 1) * c].to_vec()
    };
    let x0: Grid3 = vd
        .iter()
        .enumerate()
        .map(|(f, fr)| fr.iter().map(|r| add(r, &emb("temb", f))).collect())
        .collect();
    let z = temporal_oracle(p, m, &x0, heads);
    let z1: Grid3 = z
        .iter()
        .map(|fr| fr.iter().enumerate().map(|(t, r)| add(r, &emb("semb", t))).collect())
        .collect();
    let mut z2 = spatial_oracle(p, m, &z1, heads);
    if let Some(tl) = text {
        z2 = cross_oracle(p, m, &z2, tl, heads);
    }
    ffn_oracle(p, m, &z2)
}

// ------------------------------------------------------------------ helpers

fn to_grid(t: &Tensor<f64>) -> Grid3 {
    let s = t.shape();
    (0..s[0])
        .map(|f| (0..s[1]).map(|ti| t.data()[(f * s[1] + ti) * s[2]..][..s[2]].to_vec()).collect())
        .collect()
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    t.data().chunks(t.shape()[1]).map(<[f64]>::to_vec).collect()
}

fn assert_grid_close(got: &Tensor<f64>, want: &Grid3, tol: f64) {
    let flat: Vec<f64> = want.iter().flatten().flatten().copied().collect();
    assert_eq!(got.numel(), flat.len());
    for (i, (a, b)) in got.data().iter().zip(&flat).enumerate() {
        assert!((a - b).abs() < tol, "element {i}: {a} vs {b}");
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], r: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-r..r))
}

fn random_params(shapes: &BTreeMap<String, Vec<usize>>, seed: u64) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes
        .iter()
        .map(|(k, s)| {
            let t = if k.ends_with(".g") {
                Tensor::from_fn(s, |_| 1.0 + rng.random_range(-0.2..0.2))
            } else {
                rand_tensor(&mut rng, s, 0.5)
            };
            (k.clone(), t)
        })
        .collect()
}

fn oracle_setup(heads: usize, text_dim: usize, attention: Attention) -> (ModelConfig, Params) {
    let cfg = ModelConfig {
        frames: 3,
        viewports: 2,
        heads,
        attention,
        ..ModelConfig::default()
    };
    let enc = EncoderConfig {
        global_dim: text_dim,
        scale_channels: [8, 8, 8],
        text_len: 3,
        patch: 32,
        seed: 0,
    };
    let p = random_params(&cfg.param_shapes(&enc), 11);
    (cfg, p)
}

fn tiny_spec() -> ModelSpec {
    ModelSpec {
        model: ModelConfig {
            frames: 2,
            viewports: 4,
            heads: 2,
            fov_deg: 160.0,
            patch_out: 8,
            decoder_widths: [8, 8, 8, 8],
            blend_height: 16,
            output_height: 32,
            ..ModelConfig::default()
        },
        encoder: EncoderConfig {
            global_dim: 16,
            scale_channels: [8, 8, 16],
            text_len: 6,
            patch: 32,
            seed: 0,
        },
    }
}

fn random_frames(frames: usize, seed: u64) -> ErpFrameSequence {
    let grid = ErpGrid::new(32, 64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..frames)
        .map(|_| (0..3 * 32 * 64).map(|_| rng.random::<f32>()).collect())
        .collect();
    ErpFrameSequence::new(grid, 3, data).unwrap()
}

fn blob(lat: f64, lon: f64, height: usize) -> SaliencyMap {
    let fix = FixationMap::new(vec![(SphPoint::from_degrees(lat, lon).unwrap(), 1.0)]).unwrap();
    spherical_gaussian_smooth(&fix, 20.0, ErpGrid::with_height(height).unwrap())
}

// ------------------------------------------------------------- relevance

#[test]
fn sim_est_closed_forms() {
    let tg = Tensor::new(vec![1, 3], vec![1.0, 2.0, -1.0]).unwrap();
    let vg = Tensor::new(vec![1, 3, 3], vec![1.0, 2.0, -1.0, 2.0, -1.0, 0.0, 5.0, 10.0, -5.0]).unwrap();
    let s = sim_est(&vg, &tg).unwrap();
    assert_eq!(s.shape(), &[1, 3]);
    assert!((s.data()[0] - 1.0).abs() < 1e-7);
    assert!(s.data()[1].abs() < 1e-7);
    assert!((s.data()[2] - 1.0).abs() < 1e-7);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let vg = Tensor::from_fn(&[2, 3, 5], |_| rng.random_range(-1.0f32..1.0));
    let tg = Tensor::from_fn(&[1, 5], |_| rng.random_range(-1.0f32..1.0));
    let base = sim_est(&vg, &tg).unwrap();
    let scaled = Tensor::new(vec![2, 3, 5], vg.data().iter().map(|v| v * 7.5).collect()).unwrap();
    let tg2 = Tensor::new(vec![1, 5], tg.data().iter().map(|v| v * 0.01).collect()).unwrap();
    let s2 = sim_est(&scaled, &tg2).unwrap();
    for (a, b) in base.data().iter().zip(s2.data()) {
        assert!((a - b).abs() < 1e-6);
        assert!((-1.0..=1.0).contains(a));
    }
}

#[test]
fn sim_est_rejects_zero_vectors() {
    let tg = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
    let vg = Tensor::new(vec![1, 2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
    assert!(matches!(sim_est(&vg, &tg), Err(ModelError::ZeroNorm(_))));
    let vg = Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap();
    assert!(matches!(sim_est(&vg, &Tensor::zeros(&[1, 2])), Err(ModelError::ZeroNorm(_))));
}

fn random_locals(rng: &mut ChaCha8Rng, f: usize, t: usize) -> [Tensor<f32>; 3] {
    [(3, 8), (4, 4), (5, 2)].map(|(c, hw)| Tensor::from_fn(&[f, t, c, hw, hw], |_| rng.random_range(-1.0f32..1.0)))
}

#[test]
fn relevance_weighting() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let vl = random_locals(&mut rng, 2, 3);
    assert_eq!(apply_relevance(&vl, &Tensor::full(&[2, 3], 1.0)).unwrap(), vl);

    let mut s = Tensor::from_fn(&[2, 3], |_| rng.random_range(-1.0f32..1.0));
    s.data_mut()[4] = 0.0;
    let w = apply_relevance(&vl, &s).unwrap();
    for (m, (a, b)) in vl.iter().zip(&w).enumerate() {
        let sh = a.shape();
        for f in 0..2 {
            for t in 0..3 {
                for c in 0..sh[2] {
                    for y in 0..sh[3] {
                        for x in 0..sh[4] {
                            let idx = [f, t, c, y, x];
                            assert_eq!(b.at(&idx), a.at(&idx) * s.at(&[f, t]), "scale {m}");
                            if f * 3 + t == 4 {
                                assert_eq!(b.at(&idx), 0.0);
                            }
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn average_pooling() {
    let c = Tensor::full(&[2, 2, 3, 4, 4], 0.75f32);
    assert!(downsample(&c).data().iter().all(|&v| v == 0.75));
    let big = Tensor::<f32>::zeros(&[8, 18, 512, 28, 28]);
    assert_eq!(downsample(&big).shape(), &[8, 18, 512]);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v = Tensor::from_fn(&[2, 3, 4, 5, 5], |_| rng.random_range(-1.0f32..1.0));
    let d = downsample(&v);
    for f in 0..2 {
        for t in 0..3 {
            for c in 0..4 {
                let mut s = 0.0f64;
                for y in 0..5 {
                    for x in 0..5 {
                        s += v.at(&[f, t, c, y, x]) as f64;
                    }
                }
                assert!((d.at(&[f, t, c]) as f64 - s / 25.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn last_frame_layout() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let v = Tensor::from_fn(&[3, 2, 4, 3, 5], |_| rng.random_range(-1.0f32..1.0));
    let l = last_frame_nhwc(&v);
    assert_eq!(l.shape(), &[2, 3, 5, 4]);
    for t in 0..2 {
        for c in 0..4 {
            for y in 0..3 {
                for x in 0..5 {
                    assert_eq!(l.at(&[t, y, x, c]), v.at(&[2, t, c, y, x]));
                }
            }
        }
    }
}

// --------------------------------------------------------------- attention

#[test]
fn temporal_and_spatial_attention_match_loop_oracles() {
    let (cfg, p) = oracle_setup(2, 6, Attention::Vstca);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[3, 2, 8], 1.0);
    let mut g = Graph::<f64>::new();
    let vars = bind_params(&mut g, &p, false);
    let mut net = Net::new(&mut g, &vars, cfg.heads);
    let xv = net.graph.constant(x.clone());
    let t = net.temporal_attention(0, xv).unwrap();
    let s = net.spatial_attention(0, xv).unwrap();
    assert_grid_close(g.value(t), &temporal_oracle(&p, 0, &to_grid(&x), 2), 1e-10);
    assert_grid_close(g.value(s), &spatial_oracle(&p, 0, &to_grid(&x), 2), 1e-10);
}

#[test]
fn single_frame_attention_is_the_value_path() {
    let (cfg, p) = oracle_setup(2, 6, Attention::Vstca);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[1, 2, 8], 1.0);
    let mut g = Graph::<f64>::new();
    let vars = bind_params(&mut g, &p, false);
    let mut net = Net::new(&mut g, &vars, cfg.heads);
    let xv = net.graph.constant(x.clone());
    let y = net.temporal_attention(0, xv).unwrap();
    let want: Grid3 = vec![to_grid(&x)[0]
        .iter()
        .map(|r| {
            let v = lin(&ln(r, &p, "s0.tln"), &p["s0.tattn.wv"], &p["s0.tattn.bv"]);
            add(r, &lin(&v, &p["s0.tattn.wo"], &p["s0.tattn.bo"]))
        })
        .collect()];
    assert_grid_close(g.value(y), &want, 1e-12);
}

#[test]
fn attention_is_equivariant_to_its_independent_axis() {
    let (cfg, p) = oracle_setup(2, 6, Attention::Vstca);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[3, 2, 8], 1.0);
    let swapped = Tensor::from_fn(&[3, 2, 8], |i| {
        let (f, t, c) = (i / 16, (i / 8) % 2, i % 8);
        x.at(&[f, 1 - t, c])
    });
    let swap_f = Tensor::from_fn(&[3, 2, 8], |i| {
        let (f, t, c) = (i / 16, (i / 8) % 2, i % 8);
        x.at(&[2 - f, t, c])
    });
    let mut g = Graph::<f64>::new();
    let vars = bind_params(&mut g, &p, false);
    let mut net = Net::new(&mut g, &vars, cfg.heads);
    let (a, b, c) = (net.graph.constant(x), net.graph.constant(swapped), net.graph.constant(swap_f));
    let (ta, tb) = (net.temporal_attention(0, a).unwrap(), net.temporal_attention(0, b).unwrap());
    let (sa, sc) = (net.spatial_attention(0, a).unwrap(), net.spatial_attention(0, c).unwrap());
    for i in 0..48 {
        let (f, t, ch) = (i / 16, (i / 8) % 2, i % 8);
        let j = (f * 2 + (1 - t)) * 8 + ch;
        assert!((g.value(ta).data()[i] - g.value(tb).data()[j]).abs() < 1e-12);
        let k = ((2 - f) * 2 + t) * 8 + ch;
        assert!((g.value(sa).data()[i] - g.value(sc).data()[k]).abs() < 1e-12);
    }
}

#[test]
fn cross_attention_matches_loop_oracle() {
    // N = F x T = 4 visual tokens, L_t = 3, 2 heads, C_L = 6
    let (cfg, p) = oracle_setup(2, 6, Attention::Vstca);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[2, 2, 8], 1.0);
    let text = rand_tensor(&mut rng, &[3, 6], 1.0);
    let mut g = Graph::<f64>::new();
    let vars = bind_params(&mut g, &p, false);
    let mut net = Net::new(&mut g, &vars, cfg.heads);
    let (xv, tv) = (net.graph.constant(x.clone()), net.graph.constant(text.clone()));
    let y = net.cross_attention(0, xv, tv).unwrap();
    assert_grid_close(g.value(y), &cross_oracle(&p, 0, &to_grid(&x), &rows(&text), 2), 1e-10);
}

#[test]
fn single_token_cross_attention_ignores_queries() {
    let (cfg, p) = oracle_setup(2, 6, Attention::Vstca);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let text = rand_tensor(&mut rng, &[1, 6], 1.0);
    let v = lin(&text.data().to_vec(), &p["s0.xattn.wv"], &p["s0.xattn.bv"]);
    let delta = lin(&v, &p["s0.xattn.wo"], &p["s0.xattn.bo"]);
    for seed in 0..3 {
        let mut r2 = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = rand_tensor(&mut r2, &[2, 2, 8], 2.0);
        let mut g = Graph::<f64>::new();
        let vars = bind_params(&mut g, &p, false);
        let mut net = Net::new(&mut g, &vars, cfg.heads);
        let (xv, tv) = (net.graph.constant(x.clone()), net.graph.constant(text.clone()));
        let y = net.cross_attention(0, xv, tv).unwrap();
        let want: Grid3 = to_grid(&x).iter().map(|fr| fr.iter().map(|r| add(r, &delta)).collect()).collect();
        assert_grid_close(g.value(y), &want, 1e-12);
    }
}

#[test]
fn key_bias_shift_leaves_cross_attention_unchanged() {
    let (cfg, p) = oracle_setup(2, 6, Attention::Vstca);
    let mut shifted = p.clone();
    let bk = shifted.get_mut("s0.xattn.bk").unwrap();
    bk.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += 0.3 * i as f64 - 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_tensor(&mut rng, &[2, 2, 8], 1.0);
    let text = rand_tensor(&mut rng, &[3, 6], 1.0);
    let run = |p: &Params| {
        let mut g = Graph::<f64>::new();
        let vars = bind_params(&mut g, p, false);
        let mut net = Net::new(&mut g, &vars, cfg.heads);
        let (xv, tv) = (net.graph.constant(x.clone()), net.graph.constant(text.clone()));
        let y = net.cross_attention(0, xv, tv).unwrap();
        g.value(y).clone()
    };
    let (a, b) = (run(&p), run(&shifted));
    for (u, v) in a.data().iter().zip(b.data()) {
        assert!((u - v).abs() < 1e-12);
    }
}

#[test]
fn heads_must_divide_width() {
    let (_, p) = oracle_setup(2, 6, Attention::Vstca);
    let mut g = Graph::<f64>::new();
    let vars = bind_params(&mut g, &p, false);
    let mut net = Net::new(&mut g, &vars, 3);
    let x = net.graph.constant(Tensor::zeros(&[3, 2, 8]));
    assert!(matches!(net.temporal_attention(0, x), Err(ModelError::Config(_))));
}

#[test]
fn vstca_block_matches_composed_oracle() {
    for (attention, seed) in [(Attention::Vstca, 12), (Attention::Vsta, 13)] {
        let (cfg, p) = oracle_setup(2, 6, attention);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vd = rand_tensor(&mut rng, &[3, 2, 8], 1.0);
        let text = rand_tensor(&mut rng, &[3, 6], 1.0);
        let mut g = Graph::<f64>::new();
        let vars = bind_params(&mut g, &p, false);
        let mut net = Net::new(&mut g, &vars, cfg.heads);
        let vv = net.graph.constant(vd.clone());
        let tv = (attention == Attention::Vstca).then(|| net.graph.constant(text.clone()));
        let y = net.vstca_block(1, vv, tv).unwrap();
        assert_eq!(g.value(y).shape(), &[3, 2, 8]);
        let tl = rows(&text);
        let want = block_oracle(&p, 1, &to_grid(&vd), tv.map(|_| tl.as_slice()), 2);
        assert_grid_close(g.value(y), &want, 1e-10);
    }
}

#[test]
fn fuse_and_retain() {
    let (cfg, p) = oracle_setup(2, 6, Attention::Vstca);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let last = rand_tensor(&mut rng, &[2, 3, 4, 8], 1.0);
    let zo = rand_tensor(&mut rng, &[3, 2, 8], 1.0);
    let mut g = Graph::<f64>::new();
    let vars = bind_params(&mut g, &p, false);
    let mut net = Net::new(&mut g, &vars, cfg.heads);
    let (lv, zv, zero) = (
        net.graph.constant(last.clone()),
        net.graph.constant(zo.clone()),
        net.graph.constant(Tensor::zeros(&[3, 2, 8])),
    );
    let y = net.fuse_and_retain(zv, lv).unwrap();
    let y0 = net.fuse_and_retain(zero, lv).unwrap();
    assert_eq!(g.value(y0), &last);
    for t in 0..2 {
        for yy in 0..3 {
            for x in 0..4 {
                for c in 0..8 {
                    let want = last.at(&[t, yy, x, c]) + zo.at(&[2, t, c]);
                    assert!((g.value(y).at(&[t, yy, x, c]) - want).abs() < 1e-15);
                }
            }
        }
    }
    let big = Tensor::<f32>::zeros(&[8, 18, 512, 28, 28]);
    assert_eq!(last_frame_nhwc(&big).shape(), &[18, 28, 28, 512]);
}

// ----------------------------------------------------------------- decoder

fn decoder_spec(skips: bool, head: Head) -> ModelSpec {
    ModelSpec {
        model: ModelConfig {
            viewports: 18,
            heads: 2,
            skips,
            head,
            ..ModelConfig::default()
        },
        encoder: EncoderConfig {
            global_dim: 8,
            scale_channels: [4, 4, 4],
            text_len: 4,
            patch: 224,
            seed: 0,
        },
    }
}

fn decode_random(spec: &ModelSpec, seed: u64) -> Tensor<f32> {
    let cfg = &spec.model;
    let params: BTreeMap<String, Tensor<f32>> = random_params(&cfg.param_shapes(&spec.encoder), seed)
        .into_iter()
        .map(|(k, v)| (k, v.cast()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let mut g = Graph::<f32>::new();
    let vars = bind_params(&mut g, &params, false);
    let zf = [28, 14, 7].map(|s| Some(g.constant(Tensor::from_fn(&[18, s, s, 4], |_| rng.random_range(-1.0f32..1.0)))));
    let mut net = Net::new(&mut g, &vars, cfg.heads);
    let y = net.decode(&zf, cfg).unwrap();
    g.value(y).clone()
}

#[test]
fn decoder_resolution_and_head() {
    let spec = decoder_spec(true, Head::Sigmoid);
    let y = decode_random(&spec, 20);
    assert_eq!(y.shape(), &[18, 56, 56, 1]);
    assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    let r = decode_random(&decoder_spec(true, Head::Relu), 20);
    assert!(r.data().iter().all(|&v| v >= 0.0));
}

#[test]
fn skips_change_the_output() {
    let on = decode_random(&decoder_spec(true, Head::Sigmoid), 21);
    let off = decode_random(&decoder_spec(false, Head::Sigmoid), 21);
    assert_eq!(off.shape(), on.shape());
    let diff: f32 = on.data().iter().zip(off.data()).map(|(a, b)| (a - b).abs()).sum();
    assert!(diff > 1e-3);
}

// -------------------------------------------------------------- end to end

fn features(model: &Model, seed: u64, text: &str) -> FeatureBundle {
    let enc = ToyEncoder::new(model.spec().encoder.clone()).unwrap();
    model
        .encode(&enc, &random_frames(model.config().frames, seed), text)
        .unwrap()
}

#[test]
fn default_output_resolution_and_text_sensitivity() {
    let mut spec = decoder_spec(true, Head::Sigmoid);
    spec.model.heads = 4;
    spec.encoder.scale_channels = [4, 8, 8];
    spec.model.frames = 2;
    let model = Model::new(spec, 1).unwrap();
    let enc = ToyEncoder::new(model.spec().encoder.clone()).unwrap();
    let frames = random_frames(2, 30);
    let a = model.predict(&enc, &frames, "a red car").unwrap();
    assert_eq!((a.height(), a.width()), (480, 960));
    assert!((a.max() - 1.0).abs() < 1e-6);
    let b = model.predict(&enc, &frames, "people dancing").unwrap();
    assert_ne!(a.data(), b.data());
    assert_eq!(model.predict(&enc, &frames, "a red car").unwrap(), a);
}

#[test]
fn text_blind_configuration_ignores_text() {
    let mut spec = tiny_spec();
    spec.model.attention = Attention::Vsta;
    spec.model.sim_est = false;
    let model = Model::new(spec, 2).unwrap();
    let enc = ToyEncoder::new(model.spec().encoder.clone()).unwrap();
    let frames = random_frames(2, 31);
    let a = model.predict(&enc, &frames, "grey cat").unwrap();
    let b = model.predict(&enc, &frames, "an orange boat on the lake").unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn config_validation() {
    let mut spec = tiny_spec();
    spec.model.patch_out = 7;
    assert!(matches!(Model::new(spec, 0), Err(ModelError::Config(_))));
    let mut spec = tiny_spec();
    spec.model.heads = 3;
    assert!(matches!(Model::new(spec, 0), Err(ModelError::Config(_))));
    let model = Model::new(tiny_spec(), 0).unwrap();
    let mut b = features(&model, 1, "x");
    b.visual_global = Tensor::zeros(&[3, 4, 16]);
    assert!(model.prepare(&b).is_err());
}

#[test]
fn default_config_matches_published_settings() {
    let c = ModelConfig::default();
    assert_eq!((c.frames, c.viewports, c.heads, c.patch_out, c.mlp_ratio), (8, 18, 8, 56, 4));
    assert_eq!(c.fov_deg, 80.0);
    assert_eq!((c.blend_height, c.output_height), (240, 480));
    assert_eq!((c.head, c.attention, c.sim_est, c.skips), (Head::Sigmoid, Attention::Vstca, true, true));
    assert_eq!(TrainConfig::default().epochs, 4);
    assert_eq!(TrainConfig::default().batch, 8);
    assert_eq!(TrainConfig::default().optim.lr, 1e-5);
}

#[test]
fn spec_toml_round_trip() {
    let mut spec = tiny_spec();
    spec.model.head = Head::Relu;
    spec.model.attention = Attention::Vsta;
    let s = spec.to_toml();
    assert!(s.contains("attention = \"vsta\""), "{s}");
    assert_eq!(ModelSpec::from_toml(&s).unwrap(), spec);
    let partial = ModelSpec::from_toml("[model]\nframes = 3\n[encoder]\nglobal_dim = 4\nscale_channels = [4, 4, 4]\ntext_len = 2\npatch = 32\nseed = 1\n").unwrap();
    assert_eq!(partial.model.frames, 3);
    assert_eq!(partial.model.viewports, 18);
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let model = Model::new(tiny_spec(), 3).unwrap();
    let b = features(&model, 32, "a dog");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.tsal");
    model.save(&path).unwrap();
    let back = Model::load(tiny_spec(), &path).unwrap();
    assert_eq!(back.predict_features(&b).unwrap(), model.predict_features(&b).unwrap());
    let mut other = tiny_spec();
    other.model.skips = false;
    assert!(Model::load(other, &path).is_err());
}

#[test]
fn tangent_predictions_are_per_viewport_maps() {
    let model = Model::new(tiny_spec(), 4).unwrap();
    let inputs = model.prepare(&features(&model, 33, "sky")).unwrap();
    let set = model.predict_tangent(&inputs).unwrap();
    assert_eq!(set.shape(), [1, 8, 8, 4]);
    assert!(set.maps().iter().all(|m| m.data().iter().all(|&v| v > 0.0 && v < 1.0)));
    let blended = model.blend_plan().blend(&set).unwrap();
    let direct = model.predict_prepared(&inputs, 16).unwrap();
    for (a, b) in blended.data().iter().zip(direct.data()) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let model = Model::new(tiny_spec(), 5).unwrap();
    let inputs = model.prepare(&features(&model, 34, "a person walking")).unwrap();
    let gt = blob(10.0, 40.0, 32);
    let params: Params = model.params().iter().map(|(k, v)| (k.clone(), v.cast())).collect();

    let loss_at = |p: &Params| -> f64 {
        let mut g = Graph::<f64>::new();
        let vars = bind_params(&mut g, p, false);
        let l = model.loss_graph(&mut g, &vars, &inputs, &gt).unwrap();
        g.value(l).data()[0]
    };
    let mut g = Graph::<f64>::new();
    let vars = bind_params(&mut g, &params, true);
    let l = model.loss_graph(&mut g, &vars, &inputs, &gt).unwrap();
    g.backward(l).unwrap();

    let all: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(k, t)| (0..t.numel()).map(move |i| (k.clone(), i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let picks: Vec<&(String, usize)> = all.iter().filter(|_| rng.random_bool(0.01)).collect();
    assert!(picks.len() >= all.len() / 200, "{} of {}", picks.len(), all.len());
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (k, i) in picks {
        let analytic = g.grad(vars[k]).unwrap()[*i];
        let mut p = params.clone();
        p.get_mut(k).unwrap().data_mut()[*i] += h;
        let up = loss_at(&p);
        p.get_mut(k).unwrap().data_mut()[*i] -= 2.0 * h;
        let down = loss_at(&p);
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
        assert!(rel < 1e-2, "{k}[{i}]: analytic {analytic}, numeric {numeric}");
    }
    println!("end-to-end gradient check: worst rel. error {worst:.2e}");
}

#[test]
fn viewport_permutation_consistency() {
    let spec = tiny_spec();
    let model = Model::new(spec.clone(), 6).unwrap();
    let perm = [2, 0, 3, 1];
    let mut params = model.params().clone();
    for (k, t) in params.iter_mut() {
        if k.ends_with(".semb") {
            let c = t.shape()[1];
            let old = t.clone();
            for (new_i, &old_i) in perm.iter().enumerate() {
                t.data_mut()[new_i * c..(new_i + 1) * c].copy_from_slice(&old.data()[old_i * c..(old_i + 1) * c]);
            }
        }
    }
    let permuted = Model::with_layout(spec.clone(), params, model.layout().permuted(&perm)).unwrap();
    let enc = ToyEncoder::new(spec.encoder.clone()).unwrap();
    let frames = random_frames(2, 36);
    let a = model.predict(&enc, &frames, "a bird").unwrap();
    let b = permuted.predict(&enc, &frames, "a bird").unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-5, "{x} vs {y}");
    }
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let run = || {
        let mut model = Model::new(tiny_spec(), 7).unwrap();
        let samples: Vec<Sample> = (0..2)
            .map(|i| Sample {
                inputs: model.prepare(&features(&model, 40 + i, "a boat")).unwrap(),
                gt: blob(0.0, 90.0 * i as f64, 32),
            })
            .collect();
        let cfg = TrainConfig {
            epochs: 15,
            batch: 2,
            optim: AdamWConfig {
                lr: 3e-3,
                ..AdamWConfig::default()
            },
            seed: 1,
        };
        let logs = train(&mut model, &samples, &cfg, |_| {}).unwrap();
        (logs, model.params().clone())
    };
    let (logs, params) = run();
    assert_eq!(logs.len(), 15);
    assert!(logs.last().unwrap().loss < logs[0].loss, "{logs:?}");
    let (logs2, params2) = run();
    assert_eq!(logs, logs2);
    assert_eq!(params, params2);
}

#[test]
fn training_needs_data() {
    let mut model = Model::new(tiny_spec(), 8).unwrap();
    assert!(matches!(train(&mut model, &[], &TrainConfig::default(), |_| {}), Err(ModelError::EmptyDataset)));
}

#[test]
fn prepared_inputs_respect_switches() {
    let model = Model::new(tiny_spec(), 9).unwrap();
    let b = features(&model, 37, "water");
    let on = PreparedInputs::new(&b, true, false).unwrap();
    let off = PreparedInputs::new(&b, false, false).unwrap();
    let clamped = PreparedInputs::new(&b, true, true).unwrap();
    assert!(off.relevance.is_none());
    let s = on.relevance.as_ref().unwrap();
    assert!(clamped.relevance.as_ref().unwrap().data().iter().all(|&v| v >= 0.0));
    for m in 0..3 {
        assert_eq!(on.last_frame[m], off.last_frame[m]);
        assert_eq!(off.pooled[m], downsample(&b.visual_local[m]));
        let weighted = apply_relevance(&b.visual_local, s).unwrap();
        assert_eq!(on.pooled[m], downsample(&weighted[m]));
    }
}
