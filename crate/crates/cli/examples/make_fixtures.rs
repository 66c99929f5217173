//! Regenerates `fixtures/`: example models, inputs, job configs and the
//! golden outputs the CLI must reproduce byte for byte.
//!
//! Run with `cargo run -p hookscope-cli --example make_fixtures`.

use std::fs;
use std::path::{Path, PathBuf};

use hookscope::graph::finite_difference_gradient;
use hookscope::zoo::{self, Activation};
use hookscope::{io, GraphBuilder, ModelGraph, ModuleKind, Tensor, TensorMap};
use hookscope_cli::config::Command;
use hookscope_cli::{run, RunOptions};

type Res<T> = Result<T, Box<dyn std::error::Error>>;

fn fixture(root: &Path, name: &str) -> Res<PathBuf> {
    let dir = root.join(name);
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn save_model(dir: &Path, m: &ModelGraph) -> Res<()> {
    io::write_model(dir.join("model.hsm"), m)?;
    Ok(())
}

fn save_map(dir: &Path, name: &str, m: &TensorMap) -> Res<()> {
    io::write_tensormap(dir.join(name), m)?;
    Ok(())
}

fn golden(dir: &Path, command: Command, toml: &str) -> Res<()> {
    let config = dir.join("config.toml");
    fs::write(&config, toml)?;
    let opts = RunOptions { seed: None, out: Some(dir.join("golden")) };
    run(command, &config, &opts, Path::new("hookscope"))?;
    Ok(())
}

fn noisy(x: &TensorMap, scale: f64, seed: u64) -> Res<TensorMap> {
    let t = x.get_tensor("x")?;
    let noise = zoo::uniform_batch("x", t.rows(), &t.shape()[1..], scale, seed)?;
    Ok(x.zip_apply(&noise, |a, n| a.add(n))?)
}

fn saliency_mlp(root: &Path) -> Res<()> {
    let dir = fixture(root, "saliency_mlp")?;
    let model = zoo::mlp(&[6, 8, 3], Activation::Tanh, true, 11)?;
    let x = zoo::uniform_batch("x", 4, &[6], 1.0, 12)?;
    save_model(&dir, &model)?;
    save_map(&dir, "inputs.tmap", &x)?;
    golden(
        &dir,
        Command::Attribute,
        r#"command = "attribute"
model = "model.hsm"
seed = 0
dtype = "f64"

[attribute]
inputs = "inputs.tmap"
method = "saliency"
targets = [{ output = "y", index = 2 }]
"#,
    )?;
    // The golden must agree with central differences before it is kept.
    let fd = finite_difference_gradient(&model, &x, "y", 2, 1e-5)?;
    let fd = fd.get_tensor("x")?;
    let csv = fs::read_to_string(dir.join("golden/attribution_y_2.csv"))?;
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (n, i, v): (usize, usize, f64) = (f[0].parse()?, f[2].parse()?, f[3].parse()?);
        let want = fd.row(n)[i];
        if (v - want).abs() > 1e-7 * (1.0 + want.abs()) {
            return Err(format!("saliency golden disagrees with finite differences at ({n},{i}): {v} vs {want}").into());
        }
    }
    Ok(())
}

fn ig_cnn(root: &Path) -> Res<()> {
    let dir = fixture(root, "ig_cnn")?;
    save_model(&dir, &zoo::cnn(1, 6, 3, true, 21)?)?;
    save_map(&dir, "inputs.tmap", &zoo::uniform_batch("x", 2, &[1, 6, 6], 1.0, 22)?)?;
    golden(
        &dir,
        Command::Attribute,
        r#"command = "attribute"
model = "model.hsm"

[attribute]
inputs = "inputs.tmap"
method = "integrated_gradients"
steps = 16
targets = [{ output = "y", index = 0 }, { output = "y", index = 1 }]
"#,
    )
}

fn two_head(root: &Path) -> Res<()> {
    let dir = fixture(root, "two_head")?;
    save_model(&dir, &zoo::two_head(5, 8, 4, 31)?)?;
    save_map(&dir, "inputs.tmap", &zoo::uniform_batch("x", 3, &[5], 1.0, 32)?)?;
    golden(
        &dir,
        Command::Attribute,
        r#"command = "attribute"
model = "model.hsm"

[attribute]
inputs = "inputs.tmap"
method = "gradient_x_input"
targets = [{ output = "policy", index = 1 }, { output = "value", index = 0 }]
"#,
    )
}

fn lrp_mlp(root: &Path) -> Res<()> {
    let dir = fixture(root, "lrp_mlp")?;
    save_model(&dir, &zoo::mlp(&[5, 8, 8, 3], Activation::Relu, false, 41)?)?;
    let x = zoo::uniform_batch("x", 3, &[5], 1.0, 42)?.apply(|t| t.abs())?;
    save_map(&dir, "inputs.tmap", &x)?;
    golden(
        &dir,
        Command::Attribute,
        r#"command = "attribute"
model = "model.hsm"
dtype = "f64"

[attribute]
inputs = "inputs.tmap"
method = "lrp"
targets = [{ output = "y", index = 0 }]
rules = [
    { pattern = "*", rule = "epsilon(0.000001)" },
    { pattern = "fc0", rule = "zplus" },
]
"#,
    )
}

fn probe(root: &Path) -> Res<()> {
    let dir = fixture(root, "probe")?;
    let model = zoo::mlp(&[5, 12, 3], Activation::Relu, true, 51)?;
    let x = zoo::uniform_batch("x", 200, &[5], 1.0, 52)?;
    // The target is a fixed linear read-out of the post-activation layer.
    let u = zoo::uniform_batch("u", 1, &[12], 1.0, 53)?.get_tensor("u")?.row(0).to_vec();
    let mut hm = hookscope::HookedModel::new(model.clone());
    let mut ctx = hm.context()?;
    let h = ctx.get("act0", hookscope::Slot::Output)?;
    ctx.run(&x)?;
    let h = h.value()?;
    let y: Vec<f64> = (0..h.rows()).map(|r| h.row(r).iter().zip(&u).map(|(a, b)| a * b).sum()).collect();
    let targets = TensorMap::with_batch(vec![200]).with("y", Tensor::new(vec![200, 1], y)?)?;
    save_model(&dir, &model)?;
    save_map(&dir, "inputs.tmap", &x)?;
    save_map(&dir, "targets.tmap", &targets)?;
    golden(
        &dir,
        Command::Probe,
        r#"command = "probe"
model = "model.hsm"
seed = 3
dtype = "f64"

[probe]
inputs = "inputs.tmap"
targets = "targets.tmap"
"#,
    )
}

fn patch_mlp(root: &Path) -> Res<()> {
    let dir = fixture(root, "patch_mlp")?;
    let clean = zoo::uniform_batch("x", 4, &[6], 1.0, 62)?;
    save_model(&dir, &zoo::mlp(&[6, 10, 10, 2], Activation::Tanh, true, 61)?)?;
    save_map(&dir, "clean.tmap", &clean)?;
    save_map(&dir, "corrupt.tmap", &noisy(&clean, 0.3, 63)?)?;
    golden(
        &dir,
        Command::Patch,
        r#"command = "patch"
model = "model.hsm"
dtype = "f64"

[patch]
clean = "clean.tmap"
corrupt = "corrupt.tmap"
target = { output = "y", index = 1 }
mode = "relevance"
"#,
    )
}

fn patch_linear(root: &Path) -> Res<()> {
    let dir = fixture(root, "patch_linear")?;
    let clean = zoo::uniform_batch("x", 3, &[4], 1.0, 72)?;
    let affine = GraphBuilder::new()
        .input("x")
        .module("fc0", ModuleKind::linear(4, 5, true))
        .module("fc1", ModuleKind::linear(5, 3, true))
        .output("y", "fc1");
    save_model(&dir, &zoo::scaled_init(affine, 71)?)?;
    save_map(&dir, "clean.tmap", &clean)?;
    save_map(&dir, "corrupt.tmap", &noisy(&clean, 1.0, 73)?)?;
    golden(
        &dir,
        Command::Patch,
        r#"command = "patch"
model = "model.hsm"
dtype = "f64"

[patch]
clean = "clean.tmap"
corrupt = "corrupt.tmap"
target = { output = "y", index = 0 }
sites = ["fc0", "fc1"]
"#,
    )
}

fn maximise_linear(root: &Path) -> Res<()> {
    let dir = fixture(root, "maximise_linear")?;
    save_model(&dir, &zoo::mlp(&[4, 2], Activation::Relu, true, 81)?)?;
    golden(
        &dir,
        Command::Maximise,
        r#"command = "maximise"
model = "model.hsm"
seed = 5
dtype = "f64"

[maximise]
site = "fc0"
index = 1
shape = [4]
lr = 0.1
iters = 300
l2 = 0.5
"#,
    )
}

fn prune_mlp(root: &Path) -> Res<()> {
    let dir = fixture(root, "prune_mlp")?;
    let model = zoo::mlp(&[6, 16, 16, 3], Activation::Tanh, true, 91)?;
    let x = zoo::uniform_batch("x", 32, &[6], 1.0, 92)?;
    let y = model.forward(&x, false)?.0;
    save_model(&dir, &model)?;
    save_map(&dir, "inputs.tmap", &x)?;
    save_map(&dir, "labels.tmap", &y)?;
    golden(
        &dir,
        Command::Prune,
        r#"command = "prune"
model = "model.hsm"
dtype = "f64"

[prune]
inputs = "inputs.tmap"
sparsity = 0.5
relevance = "gradient"
target = { output = "y", index = 0 }
labels = "labels.tmap"
"#,
    )
}

fn bench_matrix(root: &Path) -> Res<()> {
    let dir = fixture(root, "bench_matrix")?;
    fs::write(
        dir.join("config.toml"),
        r#"# Timing output varies from run to run, so this config has no golden.
command = "bench"

[bench]
tasks = ["ig", "lrp", "caching", "intervention"]
models = [
    { width = 16, depth = 2 },
    { width = 64, depth = 3 },
    { width = 256, depth = 4 },
]
batches = [1, 8, 32]
steps = [32]
seeds = [0, 1, 2]
repeats = 5
warmup = 1
csv = "bench.csv"
"#,
    )?;
    Ok(())
}

fn main() -> Res<()> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    fs::create_dir_all(&root)?;
    saliency_mlp(&root)?;
    ig_cnn(&root)?;
    two_head(&root)?;
    lrp_mlp(&root)?;
    probe(&root)?;
    patch_mlp(&root)?;
    patch_linear(&root)?;
    maximise_linear(&root)?;
    prune_mlp(&root)?;
    bench_matrix(&root)?;
    println!("fixtures written to {}", root.display());
    Ok(())
}
