//! Committed test fixtures, regenerated by `gen-fixtures`.

use std::fs;
use std::path::Path;

use gradguard::data::idx::{write_idx, IdxArray};
use gradguard::{Error, Result};

pub const LINEAR_ORACLE: &str = r#"# L(x, θ) = ½(θ·x − t)² with θ = (1, 2), x = (1, 1), t = 0.
# Under unit isotropic noise the Fisher trace is 20 + 26 = 46.
schema_version = 1

[experiment]
id = "linear-oracle"
seeds = [0]

[model]
input_shape = [2]
loss = "squared-error"

[[model.layers]]
type = "dense"
inputs = 2
outputs = 1
bias = false

[params]
kind = "explicit"
values = [1.0, 2.0]

[dataset]
kind = "inline"
inputs = [[1.0, 1.0]]
targets = [[0.0]]

[batch]
offset = 0
size = 1

[defense]
kind = "noise"
sigma = { variance = 1.0 }

[bound]
prior = { kind = "flat" }
rows = { kind = "exact" }

[attack]
iterations = 200
match_loss = "squared-l2"
restarts = 1

[fl]
num_clients = 1
per_round_samples = 1
rounds = 20
eval_samples = 1
server_optimizer = { kind = "sgd", lr = 0.1 }

[sweep]
rounds = 2

[[grid]]
kind = "prune"
budget = { ratio = 0.0 }

[[grid]]
kind = "prune"
budget = { ratio = 0.5 }

[[grid]]
kind = "prune"
budget = { ratio = 1.0 }
"#;

pub const IDX_IMAGES: &str = "idx4-images-idx3-ubyte";
pub const IDX_LABELS: &str = "idx4-labels-idx1-ubyte";
pub const LINEAR_ORACLE_FILE: &str = "linear-oracle.toml";

/// Four 28×28 patterns: a filled square, a ring, diagonal stripes and a gradient.
pub fn idx_images() -> IdxArray {
    let (n, h, w) = (4usize, 28usize, 28usize);
    let mut data = Vec::with_capacity(n * h * w);
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                let v: u32 = match i {
                    0 => u32::from((8..20).contains(&y) && (8..20).contains(&x)) * 255,
                    1 => {
                        let (dy, dx) = (y as i32 - 14, x as i32 - 14);
                        let r2 = dy * dy + dx * dx;
                        u32::from((36..100).contains(&r2)) * 200
                    }
                    2 => u32::from((x + y) % 7 < 3) * 128,
                    _ => ((x + y) * 255 / (w + h - 2)) as u32,
                };
                data.push(v as u8);
            }
        }
    }
    IdxArray {
        dims: vec![n, h, w],
        data,
    }
}

pub fn idx_labels() -> IdxArray {
    IdxArray {
        dims: vec![4],
        data: vec![0, 1, 2, 3],
    }
}

pub fn write_all(dir: &Path) -> Result<Vec<String>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg = dir.join(LINEAR_ORACLE_FILE);
    fs::write(&cfg, LINEAR_ORACLE).map_err(|e| Error::io(&cfg, e))?;
    write_idx(&dir.join(IDX_IMAGES), &idx_images())?;
    write_idx(&dir.join(IDX_LABELS), &idx_labels())?;
    Ok(vec![
        LINEAR_ORACLE_FILE.into(),
        IDX_IMAGES.into(),
        IDX_LABELS.into(),
    ])
}
