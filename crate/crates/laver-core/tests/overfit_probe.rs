//! Learnability probe: the model must be able to memorize a small fixed
//! corpus with the language-modeling objective alone. Run manually:
//! `cargo test -p laver-core --test overfit_probe -- --ignored --nocapture`

use laver_core::data::{generate, DataConfig};
use laver_core::layout::{build_mixed_layout, SegmentSpec};
use laver_core::losses::lm_loss;
use laver_core::model::{
    backward, embed_image, embed_tokens, forward_cached, GradSeeds, ModelConfig, ModelParams,
};
use laver_core::tensor::{Rng, Tensor};
use laver_core::train::{Adam, OptimizerConfig};

#[test]
#[ignore]
fn can_overfit_fixed_corpus() {
    let model = ModelConfig::default();
    let data = DataConfig::default();
    let mut rng = Rng::seeded(11);
    let corpus = generate(&mut rng, &model, &data, 16).unwrap();
    let mut params = ModelParams::init(&model, &mut Rng::seeded(1)).unwrap();
    let n = model.n_vision();
    let layout = build_mixed_layout(&[
        SegmentSpec::vision(model.grid_rows, model.grid_cols, 0),
        SegmentSpec::text(5),
    ])
    .unwrap();
    let steps = 600;
    let mut opt = Adam::new(
        &params,
        OptimizerConfig {
            lr: 3e-3,
            warmup_ratio: 0.02,
            ..OptimizerConfig::default()
        },
        steps,
    );

    for step in 0..steps {
        let mut grads = params.zeros_like();
        let mut loss_sum = 0.0;
        for sample in &corpus {
            let vision = embed_image(&params, &sample.pixels).unwrap();
            let text = sample.text_tokens();
            let text_emb = embed_tokens(&params, &text).unwrap();
            let mut emb = Tensor::zeros(&[n + 5, model.d_model]);
            emb.data_mut()[..n * model.d_model].copy_from_slice(vision.data());
            emb.data_mut()[n * model.d_model..].copy_from_slice(text_emb.data());
            let cache = forward_cached(&params, &emb, &layout, &[]).unwrap();
            let mut targets = vec![0usize; n];
            targets.extend(&text);
            let lm = lm_loss(cache.text_logits(), &targets, sample.prompt_len).unwrap();
            loss_sum += lm.value / corpus.len() as f64;
            let d: Vec<f64> = lm.grad.iter().map(|g| g / corpus.len() as f64).collect();
            let d_emb = backward(
                &params,
                &cache,
                &layout,
                GradSeeds {
                    d_text_logits: Some(&d),
                    d_visual_logits: None,
                },
                &mut grads,
            )
            .unwrap();
            // projector + embedding routing
            let mut d_tokens = Tensor::zeros(&[n, model.d_model]);
            for r in 0..n {
                d_tokens.row_mut(r).copy_from_slice(d_emb.row(r));
            }
            laver_core::model::accumulate_projector_grad(&model, &sample.pixels, &d_tokens, &mut grads)
                .unwrap();
            for r in n..n + 5 {
                let id = targets[r];
                for (g, &v) in grads.tok_embed.row_mut(id).iter_mut().zip(d_emb.row(r)) {
                    *g += v;
                }
            }
        }
        opt.step(&mut params, &grads, step);
        if step % 50 == 0 || step == steps - 1 {
            println!("step {step}: corpus lm loss {loss_sum:.4}");
        }
    }

    // final corpus accuracy
    let mut correct = 0;
    for sample in &corpus {
        let vision = embed_image(&params, &sample.pixels).unwrap();
        let text_emb = embed_tokens(&params, &sample.prompt).unwrap();
        let t = n + 4;
        let eval_layout = build_mixed_layout(&[
            SegmentSpec::vision(model.grid_rows, model.grid_cols, 0),
            SegmentSpec::text(4),
        ])
        .unwrap();
        let mut emb = Tensor::zeros(&[t, model.d_model]);
        emb.data_mut()[..n * model.d_model].copy_from_slice(vision.data());
        emb.data_mut()[n * model.d_model..].copy_from_slice(text_emb.data());
        let cache = forward_cached(&params, &emb, &eval_layout, &[]).unwrap();
        let logits = cache.text_logits().row(t - 1);
        let pred = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if pred == sample.answer {
            correct += 1;
        }
    }
    println!("memorization accuracy: {correct}/16");
    assert!(correct >= 15, "failed to memorize: {correct}/16");
}
