#![allow(dead_code)]

use std::path::Path;

use adnet_core::data::{self, ClassTable, ImageSet, Manifest, ManifestEntry, Split};
use adnet_core::{Exec, Tensor};

/// Six nested loops: out[n,f,y,x] = sum_{c,i,j} x[n,c,y+i,x+j] * w[f,c,i,j] + b[f],
/// summed with c outermost and j innermost, bias added last.
pub fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (f, kh, kw) = (ws[0], ws[2], ws[3]);
    let (oh, ow) = (h - kh + 1, wd - kw + 1);
    let mut out = vec![0.0; n * f * oh * ow];
    for ni in 0..n {
        for fi in 0..f {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                acc += x.data()[((ni * c + ci) * h + y + i) * wd + xx + j]
                                    * w.data()[((fi * c + ci) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((ni * f + fi) * oh + y) * ow + xx] = acc + b.data()[fi];
                }
            }
        }
    }
    Tensor::from_vec(vec![n, f, oh, ow], out).unwrap()
}

/// All-pairs AUC: P(score_pos > score_neg) + 0.5 P(tie).
pub fn brute_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if positive[i] && !positive[j] {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

/// Writes the 30-image separable set under `root` and loads it as one
/// training split.
pub fn synthetic_train_set(root: &Path, per_class: usize, seed: u64) -> (Manifest, ImageSet) {
    let items = data::write_synthetic_dataset(root, per_class, seed).unwrap();
    let manifest = Manifest {
        entries: items
            .into_iter()
            .map(|(path, label)| ManifestEntry {
                path,
                label,
                split: Split::Train,
            })
            .collect(),
        classes: ClassTable::canonical(),
        seed,
        train_fraction: "0.5".parse().unwrap(),
    };
    let set = ImageSet::load(&manifest, Split::Train, false, Exec::Parallel).unwrap();
    (manifest, set)
}
