//! Versioned binary weight format.
//!
//! Layout (little-endian): magic `AMCW`, u32 version, u32 weighted-layer
//! count, then per weighted layer u32 dims[4] (n, c, k, k; dense uses
//! n, c, 1, 1), f32 weights row-major, f32 biases.
//!
//! Loading takes the architecture as a template. Channel-pruned nets store
//! shrunk dims; the loader rebuilds the chain, checking that the shrunk
//! shapes stay mutually consistent.

use super::{Layer, LayerKind, Network};
use crate::error::{Error, Result};
use crate::fsutil;
use std::io::Read;
use std::path::Path;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"AMCW";
pub const WEIGHTS_VERSION: u32 = 1;

pub fn save_weights(net: &Network, path: &Path) -> Result<()> {
    let weighted: Vec<&Layer> = net
        .layers
        .iter()
        .filter(|l| l.spec.kind.is_weighted())
        .collect();
    let mut buf = Vec::new();
    buf.extend_from_slice(WEIGHTS_MAGIC);
    buf.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    buf.extend_from_slice(&(weighted.len() as u32).to_le_bytes());
    for layer in weighted {
        let s = &layer.spec;
        let dims: [u32; 4] = match s.kind {
            LayerKind::Conv2d => [s.n as u32, s.c as u32, s.k as u32, s.k as u32],
            LayerKind::Dense => [s.n as u32, s.c as u32, 1, 1],
            _ => unreachable!(),
        };
        for d in dims {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for w in &layer.weights {
            buf.extend_from_slice(&w.to_le_bytes());
        }
        for b in &layer.biases {
            buf.extend_from_slice(&b.to_le_bytes());
        }
    }
    fsutil::atomic_write(path, &buf)
}

/// Loads weights saved by [`save_weights`], using `template` for the layer
/// kinds, kernel sizes, strides, and pooling structure. Weighted dims may
/// be equal to the template's or channel-shrunk; anything else is a shape
/// error naming the first offending layer.
pub fn load_weights(path: &Path, template: &Network) -> Result<Network> {
    let mut file = std::fs::File::open(path)?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)?;
    let mut r = fsutil::ByteReader::new(&buf, path);
    let magic = r.bytes::<4>()?;
    if &magic != WEIGHTS_MAGIC {
        return Err(Error::Format(format!("{}: bad magic", path.display())));
    }
    let version = r.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let count = r.u32()? as usize;
    let expected = template.prunable_indices().len();
    if count != expected {
        return Err(Error::Format(format!(
            "{}: {count} weighted layers, template has {expected}",
            path.display()
        )));
    }

    let mut blocks = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        let c = r.u32()? as usize;
        let kh = r.u32()? as usize;
        let kw = r.u32()? as usize;
        let wl = n * c * kh * kw;
        let mut weights = Vec::with_capacity(wl);
        for _ in 0..wl {
            weights.push(r.f32()?);
        }
        let mut biases = Vec::with_capacity(n);
        for _ in 0..n {
            biases.push(r.f32()?);
        }
        blocks.push((n, c, kh, kw, weights, biases));
    }
    r.expect_eof()?;

    rebuild(template, &blocks, path)
}

type Block = (usize, usize, usize, usize, Vec<f32>, Vec<f32>);

/// Rebuilds a (possibly channel-shrunk) network over the template chain.
fn rebuild(template: &Network, blocks: &[Block], origin: &Path) -> Result<Network> {
    let mut net = template.clone();
    let mut block_iter = blocks.iter();
    // current activation shape while walking the chain
    let (mut c, mut h, mut w) = (net.input_c, net.input_h, net.input_w);
    let last_weighted = *template.prunable_indices().last().unwrap();
    for (i, layer) in net.layers.iter_mut().enumerate() {
        let spec = &mut layer.spec;
        match spec.kind {
            LayerKind::Conv2d | LayerKind::Dense => {
                let (n_f, c_f, kh_f, kw_f, weights, biases) = block_iter.next().unwrap();
                let k_expected = if spec.kind == LayerKind::Dense { 1 } else { spec.k };
                if *kh_f != k_expected || *kw_f != k_expected {
                    return Err(Error::ShapeMismatch {
                        layer: i,
                        detail: format!(
                            "{}: kernel {}x{} vs template {}",
                            origin.display(),
                            kh_f,
                            kw_f,
                            k_expected
                        ),
                    });
                }
                if *c_f != c {
                    return Err(Error::ShapeMismatch {
                        layer: i,
                        detail: format!(
                            "{}: input channels {} vs chain {}",
                            origin.display(),
                            c_f,
                            c
                        ),
                    });
                }
                if *n_f > spec.n || *n_f == 0 {
                    return Err(Error::ShapeMismatch {
                        layer: i,
                        detail: format!(
                            "{}: output channels {} vs template {}",
                            origin.display(),
                            n_f,
                            spec.n
                        ),
                    });
                }
                if i == last_weighted && *n_f != spec.n {
                    return Err(Error::ShapeMismatch {
                        layer: i,
                        detail: format!(
                            "{}: classifier outputs {} vs {}",
                            origin.display(),
                            n_f,
                            spec.n
                        ),
                    });
                }
                spec.n = *n_f;
                spec.c = *c_f;
                spec.input_h = h;
                spec.input_w = w;
                layer.weights = weights.clone();
                layer.biases = biases.clone();
                layer.mask = None;
                if spec.kind == LayerKind::Conv2d {
                    h = spec.out_h();
                    w = spec.out_w();
                } else {
                    h = 1;
                    w = 1;
                }
                c = spec.n;
            }
            LayerKind::Relu => {
                spec.n = c;
                spec.c = c;
                spec.input_h = h;
                spec.input_w = w;
            }
            LayerKind::MaxPool => {
                spec.n = c;
                spec.c = c;
                spec.input_h = h;
                spec.input_w = w;
                h = spec.out_h();
                w = spec.out_w();
            }
            LayerKind::Flatten => {
                spec.c = c;
                spec.input_h = h;
                spec.input_w = w;
                spec.n = c * h * w;
                c = spec.n;
                h = 1;
                w = 1;
            }
        }
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn tmpdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "amc-io-{}-{:?}",
            std::process::id(),
            std::thread::current().id()
        ));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tmpdir();
        let mut net = Network::conv3((1, 10, 10), 4).unwrap();
        net.init_weights(17);
        let path = dir.join("w.amcw");
        save_weights(&net, &path).unwrap();
        let back = load_weights(&path, &net).unwrap();
        for (a, b) in net.layers.iter().zip(&back.layers) {
            assert_eq!(a.weights, b.weights);
            assert_eq!(a.biases, b.biases);
        }
        // identical forward outputs
        let x = Tensor::new(vec![1, 1, 10, 10], vec![0.3; 100]).unwrap();
        assert_eq!(net.forward(&x).unwrap().data(), back.forward(&x).unwrap().data());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tmpdir();
        let mut net = Network::conv3((1, 10, 10), 4).unwrap();
        net.init_weights(1);
        let path = dir.join("w.amcw");
        save_weights(&net, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'Z';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_weights(&path, &net), Err(Error::Format(_))));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tmpdir();
        let mut net = Network::conv3((1, 10, 10), 4).unwrap();
        net.init_weights(1);
        let path = dir.join("w.amcw");
        save_weights(&net, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(load_weights(&path, &net), Err(Error::Format(_))));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn mismatched_template_names_layer() {
        let dir = tmpdir();
        let mut net = Network::conv3((1, 10, 10), 4).unwrap();
        net.init_weights(1);
        let path = dir.join("w.amcw");
        save_weights(&net, &path).unwrap();
        let other = Network::conv3((1, 12, 12), 4).unwrap(); // flatten size differs
        match load_weights(&path, &other) {
            Err(Error::ShapeMismatch { layer, .. }) => assert!(layer > 0),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
