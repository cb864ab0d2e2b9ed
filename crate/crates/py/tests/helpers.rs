use mixer::convert::{docs_of, queries_of, to_rows, train_model};
use mixer_core::config::RunConfig;
use mixer_core::pipeline::build_dataset;

const TINY: &str = r#"
seed = 2
[model]
d = 16
n = 8
n_raw = 16
backbone_hidden = 8
vocab = 64
max_text_len = 8
[data]
num_products = 6
relevance_groups = 2
min_samples_per_product = 6
mean_samples_per_product = 8
vocab_size = 64
n_raw = 16
max_tokens = 6
[train]
learning_rate = 0.02
[[train.plan]]
name = "A"
dataset = "large"
iterations = 8
"#;

#[test]
fn trained_model_embeds_held_out_samples() {
    let cfg = RunConfig::from_toml(TINY).unwrap();
    let files = build_dataset(&cfg).unwrap();
    let (state, hash) = train_model(&cfg, &files).unwrap();
    let (_, again) = train_model(&cfg, &files).unwrap();
    assert_eq!(hash, again);

    let queries = queries_of(&files.test_samples);
    let (raws, tokens) = docs_of(&files.test_samples);
    assert_eq!(queries.len(), 6);
    assert_eq!(raws.len(), 6);
    let refs: Vec<&[f64]> = raws.iter().map(Vec::as_slice).collect();
    let z = to_rows(&state.model.embed_docs(&refs, &tokens).unwrap());
    for row in z {
        assert_eq!(row.len(), 16);
        let n: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }
}
