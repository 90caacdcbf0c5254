//! Phase timings for one training step at a desk-scale config.
//! Run with: cargo run --release -p emo-core --example profile

use std::time::Instant;

use emo_core::datagen::{CorpusConfig, CorpusStream};
use emo_core::model::{lm_forward_loss, lm_loss_and_grad, ModelConfig, ModelParams};
use emo_core::rng::substream;

fn main() {
    let mut mc = ModelConfig::desk_default();
    mc.n_layers = 2;
    mc.d_model = 16;
    mc.n_q_heads = 2;
    mc.n_kv_heads = 1;
    mc.d_head = 8;
    mc.vocab_size = 512;
    mc.seq_len = 64;
    mc.dense_prefix_layers = 1;
    mc.n_experts = 2;
    mc.top_k = 2;
    mc.d_expert_hidden = 32;
    mc.n_shared_experts = 1;

    let mut cc = CorpusConfig::desk_default();
    cc.vocab_size = 512;
    cc.seq_len = 64;
    let mut stream = CorpusStream::new(cc).unwrap();

    let params = ModelParams::init(&mc, &mut substream(0, "profile")).unwrap();
    let n_seqs = 8192 / 64;

    let t = Instant::now();
    let batch = stream.next_batch(n_seqs);
    println!("datagen 8192 tokens: {:?}", t.elapsed());

    let t = Instant::now();
    let _ = lm_forward_loss(&params, &mc, &batch.tokens).unwrap();
    println!("forward only:        {:?}", t.elapsed());

    let t = Instant::now();
    let _ = lm_loss_and_grad(&params, &mc, &batch.tokens).unwrap();
    println!("forward+backward:    {:?}", t.elapsed());

    let t = Instant::now();
    for _ in 0..4 {
        let b = stream.next_batch(n_seqs);
        let _ = lm_loss_and_grad(&params, &mc, &b.tokens).unwrap();
    }
    println!("4 full steps:        {:?}", t.elapsed());

    use emo_core::numerics::ops::{cross_entropy_logits, cross_entropy_logits_vjp, softmax};
    use emo_core::numerics::tensor::{matmul, Tensor};
    let rows = 127 * 63;
    let mut rng = substream(1, "profile/ce");
    let mut randn = |shape: &[usize]| {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| emo_core::rng::next_normal(&mut rng))
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    };
    let hf = randn(&[rows, 16]);
    let head = randn(&[16, 512]);
    let targets: Vec<u32> = (0..rows as u32).map(|i| i % 512).collect();

    let t = Instant::now();
    let logits = matmul(&hf, &head).unwrap();
    println!("gemm [8001,16]x[16,512]: {:?}", t.elapsed());

    let t = Instant::now();
    let ce = cross_entropy_logits(&logits, &targets).unwrap();
    println!("ce forward (lse):    {:?} ({ce:.3})", t.elapsed());

    let t = Instant::now();
    let g = cross_entropy_logits_vjp(&logits, &targets, 1.0);
    println!("ce backward (softmax): {:?}", t.elapsed());

    let headt = emo_core::numerics::tensor::transpose(&head);
    let t = Instant::now();
    let _ = matmul(&g, &headt).unwrap();
    println!("gemm [8001,512]x[512,16]: {:?}", t.elapsed());

    let hft = emo_core::numerics::tensor::transpose(&hf);
    let t = Instant::now();
    let _ = matmul(&hft, &g).unwrap();
    println!("gemm [16,8001]x[8001,512]: {:?}", t.elapsed());

    let scores = randn(&[8001, 64]);
    let t = Instant::now();
    let _ = softmax(&scores);
    println!("softmax [8001,64]:   {:?}", t.elapsed());

    use emo_core::model::attention::attention_forward;
    use emo_core::model::moe::moe_forward_cached;
    use emo_core::model::FeedForward;
    let x = randn(&[8192, 16]);
    let layer = &params.layers[1];
    let t = Instant::now();
    let (_, acache) =
        attention_forward(&x, &layer.wq, &layer.wk, &layer.wv, &layer.wo, &mc).unwrap();
    println!("attention fwd:       {:?}", t.elapsed());

    let FeedForward::Moe(m) = &layer.ffn else { panic!() };
    let t = Instant::now();
    let (_, _, _mcache) = moe_forward_cached(&x, m, mc.top_k).unwrap();
    println!("moe fwd:             {:?}", t.elapsed());

    use emo_core::numerics::ops::{rms_norm, swiglu_batch};
    let w = randn(&[16]);
    let t = Instant::now();
    let _ = rms_norm(&x, &w, 1e-6).unwrap();
    println!("rms_norm [8192,16]:  {:?}", t.elapsed());

    let wg = randn(&[32, 16]);
    let wu = randn(&[32, 16]);
    let wd = randn(&[16, 32]);
    let t = Instant::now();
    let _ = swiglu_batch(&x, &wg, &wu, &wd).unwrap();
    println!("swiglu [8192,16]h32: {:?}", t.elapsed());

    use emo_core::model::attention::attention_backward;
    let g = randn(&[8192, 16]);
    let t = Instant::now();
    let _ = attention_backward(&x, &layer.wq, &layer.wk, &layer.wv, &layer.wo, &mc, &acache, &g)
        .unwrap();
    println!("attention bwd:       {:?}", t.elapsed());
}
