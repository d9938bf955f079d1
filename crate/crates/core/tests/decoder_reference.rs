use guwen_core::checkpoint::build_model;
use guwen_core::model::{Mode, ModelConfig, ParamStore, Session, TokenBatch};
use guwen_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

fn p<'a>(params: &'a ParamStore<f64>, name: &str) -> &'a [f64] {
    params
        .get(name)
        .unwrap_or_else(|| panic!("missing {name}"))
        .data()
}

fn linear(params: &ParamStore<f64>, x: &Mat, prefix: &str) -> Mat {
    let w = p(params, &format!("{prefix}.weight"));
    let b = p(params, &format!("{prefix}.bias"));
    let out = b.len();
    x.iter()
        .map(|row| {
            (0..out)
                .map(|j| {
                    b[j] + row
                        .iter()
                        .enumerate()
                        .map(|(i, v)| v * w[i * out + j])
                        .sum::<f64>()
                })
                .collect()
        })
        .collect()
}

fn layer_norm(params: &ParamStore<f64>, x: &Mat, prefix: &str) -> Mat {
    let g = p(params, &format!("{prefix}.gamma"));
    let b = p(params, &format!("{prefix}.beta"));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-12).sqrt();
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) * inv * g[i] + b[i])
                .collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect())
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Multi-head attention of every query over all given keys.
fn attention(params: &ParamStore<f64>, q_in: &Mat, kv_in: &Mat, heads: usize, prefix: &str) -> Mat {
    let q = linear(params, q_in, &format!("{prefix}.query"));
    let k = linear(params, kv_in, &format!("{prefix}.key"));
    let v = linear(params, kv_in, &format!("{prefix}.value"));
    let h = q[0].len();
    let d = h / heads;
    let mut ctx = vec![vec![0.0; h]; q.len()];
    for (i, qi) in q.iter().enumerate() {
        for head in 0..heads {
            let cols = head * d..(head + 1) * d;
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (j, vj) in v.iter().enumerate() {
                for c in cols.clone() {
                    ctx[i][c] += e[j] / z * vj[c];
                }
            }
        }
    }
    linear(params, &ctx, &format!("{prefix}.output"))
}

/// Logits for the last token of `prefix`, computed from that prefix alone.
fn reference_step(
    cfg: &ModelConfig,
    params: &ParamStore<f64>,
    prefix: &[u32],
    memory: &Mat,
) -> Vec<f64> {
    let h = cfg.hidden_size;
    let word = p(params, "decoder.embeddings.word");
    let pos = p(params, "decoder.embeddings.position");
    let x: Mat = prefix
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            (0..h)
                .map(|c| word[t as usize * h + c] + pos[i * h + c])
                .collect()
        })
        .collect();
    let mut x = layer_norm(params, &x, "decoder.embeddings.ln");
    for l in 0..cfg.decoder_layers {
        let pre = format!("decoder.{l}");
        let a = attention(params, &x, &x, cfg.num_heads, &format!("{pre}.self_attn"));
        let y = layer_norm(params, &add(&x, &a), &format!("{pre}.self_attn.ln"));
        let c = attention(
            params,
            &y,
            memory,
            cfg.num_heads,
            &format!("{pre}.cross_attn"),
        );
        let z = layer_norm(params, &add(&y, &c), &format!("{pre}.cross_attn.ln"));
        let inner: Mat = linear(params, &z, &format!("{pre}.ffn.inner"))
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        let outer = linear(params, &inner, &format!("{pre}.ffn.outer"));
        x = layer_norm(params, &add(&z, &outer), &format!("{pre}.ffn.ln"));
    }
    let logits = linear(params, &x, "decoder.output");
    logits.last().unwrap().clone()
}

fn teacher_forced(
    cfg: &ModelConfig,
    params: &ParamStore<f64>,
    target: &[u32],
    memory: &Mat,
) -> Vec<f64> {
    let src_len = memory.len();
    let batch = TokenBatch::from_rows(&[target.to_vec()], 0);
    let mut s = Session::new(cfg, params, Mode::Eval);
    let flat: Vec<f64> = memory.iter().flatten().copied().collect();
    let mem = s
        .graph
        .constant(Tensor::new(vec![src_len, cfg.hidden_size], flat).unwrap());
    let logits = s.decode(&batch, mem, &vec![1; src_len], src_len).unwrap();
    s.value(logits).data().to_vec()
}

fn random_memory(rng: &mut impl Rng, len: usize, h: usize) -> Mat {
    (0..len)
        .map(|_| (0..h).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

#[test]
fn one_layer_decoder_matches_step_by_step_reference() {
    let cfg = ModelConfig::toy(12, 16).with_decoder(1);
    let mut ckpt = build_model::<f64>(&cfg, 3).unwrap();
    // Larger weights make every sublayer matter numerically.
    let names: Vec<String> = ckpt.params.names().cloned().collect();
    for n in names {
        let t = ckpt.params.get_mut(&n).unwrap();
        *t = t.map(|x| x * 10.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let memory = random_memory(&mut rng, 5, cfg.hidden_size);
    let target: Vec<u32> = (0..6).map(|_| rng.random_range(0..12)).collect();
    let full = teacher_forced(&cfg, &ckpt.params, &target, &memory);
    let v = cfg.vocab_size;
    for t in 1..=target.len() {
        let want = reference_step(&cfg, &ckpt.params, &target[..t], &memory);
        let got = &full[(t - 1) * v..t * v];
        for (a, b) in got.iter().zip(&want) {
            assert!(
                (a - b).abs() < 1e-9 * (1.0 + b.abs()),
                "step {t}: {a} vs {b}"
            );
        }
    }
}

#[test]
fn decoder_reads_encoder_memory() {
    let cfg = ModelConfig::toy(12, 16).with_decoder(1);
    let ckpt = build_model::<f64>(&cfg, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let target = [2u32, 7, 9];
    let zero = vec![vec![0.0; cfg.hidden_size]; 4];
    let a = teacher_forced(&cfg, &ckpt.params, &target, &zero);
    let b = teacher_forced(
        &cfg,
        &ckpt.params,
        &target,
        &random_memory(&mut rng, 4, cfg.hidden_size),
    );
    let diff = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(diff > 1e-6, "memory had no effect ({diff})");
    assert_eq!(a, teacher_forced(&cfg, &ckpt.params, &target, &zero));
}
