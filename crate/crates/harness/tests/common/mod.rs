#![allow(dead_code)]

use std::path::Path;

use conprediff::RunConfig;

pub const TINY: &str = r#"
seed = 3
name = "tiny"

[model.denoiser]
base_channels = 4
channel_mults = [1, 2]
time_emb_dim = 8
groups = 2
timesteps = 20
codebook_size = 4
token_emb_dim = 4

[model.context]
stride = 1
q = 4
hidden = [8]
latent_hidden = [6]

[dataset]
kind = "two_mode"
count = 64
size = 8

[train]
steps = 6
batch_size = 4
lr = 1e-3
log_every = 0

[sample]
steps = 10

[inpaint]
steps = 10
resample = 2
jump = 2

[tokenizer]
iterations = 5
fit_pixels = 2000
"#;

pub fn tiny() -> RunConfig {
    RunConfig::from_toml(TINY).unwrap()
}

pub fn write_tiny(dir: &Path, extra: &str) -> std::path::PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, format!("{TINY}\n{extra}")).unwrap();
    p
}
