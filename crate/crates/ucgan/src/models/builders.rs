use super::network::{Head, Layer, Network};
use super::{ModelConfig, ModelError, DROPOUT_RATE};
use crate::autodiff::Scalar;

fn conv(name: String, in_c: usize, out_c: usize) -> Layer {
    Layer::Conv3x3 {
        name,
        in_c,
        out_c,
        bn: true,
        act: true,
    }
}

/// Final image-producing convolution: linear, squashed separately.
fn conv_out(name: &str, in_c: usize) -> Layer {
    Layer::Conv3x3 {
        name: name.to_string(),
        in_c,
        out_c: 3,
        bn: false,
        act: false,
    }
}

fn dense(name: &str, in_w: usize, out_w: usize, act: bool) -> Layer {
    Layer::Dense {
        name: name.to_string(),
        in_w,
        out_w,
        act,
    }
}

/// Downsampling half of the autoencoder pair: per block two convolutions,
/// a 2x2 average pool, then one more convolution at the pooled size.
/// Channels double per block up to the cap.
fn encoder_blocks(cfg: &ModelConfig, prefix: &str) -> (Vec<Layer>, usize) {
    let mut layers = Vec::new();
    let mut c_prev = 3;
    for b in 0..cfg.blocks() {
        let c = cfg.block_channels(b);
        layers.push(conv(format!("{prefix}{b}c0"), c_prev, c));
        layers.push(conv(format!("{prefix}{b}c1"), c, c));
        layers.push(Layer::AvgPool {
            kernel: 2,
            stride: 2,
        });
        layers.push(conv(format!("{prefix}{b}c2"), c, c));
        c_prev = c;
    }
    (layers, c_prev)
}

/// Upsampling half: channels halve per block while the grid doubles,
/// starting from a 4x4 unfold.
fn generator_blocks(cfg: &ModelConfig, prefix: &str, mut c_prev: usize) -> (Vec<Layer>, usize) {
    let c_top = cfg.top_channels();
    let mut layers = Vec::new();
    for b in 0..cfg.blocks() {
        let c = (c_top >> (b + 1)).max(4);
        layers.push(conv(format!("{prefix}{b}c0"), c_prev, c));
        layers.push(conv(format!("{prefix}{b}c1"), c, c));
        layers.push(Layer::Upsample2);
        c_prev = c;
    }
    (layers, c_prev)
}

/// Image -> `2d` values on unit circles.
pub fn build_encoder<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Network<T>, ModelError> {
    cfg.validate()?;
    let (mut trunk, c_top) = encoder_blocks(cfg, "e");
    trunk.push(Layer::Flatten);
    trunk.push(dense("e_fc", c_top * 16, cfg.latent_width(), false));
    trunk.push(Layer::NormalizePairs);
    Ok(Network::assemble(
        "E",
        trunk,
        vec![],
        vec![3, cfg.resolution, cfg.resolution],
        vec![cfg.latent_width()],
        seed,
    ))
}

/// Latent-plus-attributes vector -> image in `[0, 1]`.
///
/// After the regular upsampling blocks reach full resolution, one extra
/// round trip (upsample to twice the resolution, convolve, average-pool
/// back) smooths each output pixel over its neighborhood.
pub fn build_generator<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Network<T>, ModelError> {
    cfg.validate()?;
    let c_top = cfg.top_channels();
    let in_w = cfg.latent_width() + cfg.attr_width();
    let mut trunk = vec![
        dense("g_fc", in_w, c_top * 16, false),
        Layer::Reshape {
            shape: vec![c_top, 4, 4],
        },
    ];
    let (blocks, c_last) = generator_blocks(cfg, "g", c_top);
    trunk.extend(blocks);
    trunk.push(conv("g_t0".to_string(), c_last, c_last));
    trunk.push(Layer::Upsample2);
    trunk.push(conv("g_t1".to_string(), c_last, c_last));
    trunk.push(conv_out("g_out", c_last));
    trunk.push(Layer::AvgPool {
        kernel: 2,
        stride: 2,
    });
    trunk.push(Layer::Squash01);
    Ok(Network::assemble(
        "G",
        trunk,
        vec![],
        vec![in_w],
        vec![3, cfg.resolution, cfg.resolution],
        seed,
    ))
}

/// Conditional autoencoder critic: encoder half without the pair
/// normalizer, a `2d` bottleneck, then the generator half without its
/// final smoothing round trip. The conditioning vector joins as extra
/// channels right after the 4x4 unfold.
pub fn build_discriminator<T: Scalar>(
    cfg: &ModelConfig,
    seed: u64,
) -> Result<Network<T>, ModelError> {
    cfg.validate()?;
    let c_top = cfg.top_channels();
    let a = cfg.attr_width();
    let (mut trunk, c_enc) = encoder_blocks(cfg, "d_e");
    trunk.push(Layer::Flatten);
    trunk.push(dense("d_efc", c_enc * 16, cfg.latent_width(), false));
    trunk.push(dense("d_gfc", cfg.latent_width(), c_top * 16, false));
    trunk.push(Layer::Reshape {
        shape: vec![c_top, 4, 4],
    });
    trunk.push(Layer::ConcatAttr { width: a });
    let (blocks, c_last) = generator_blocks(cfg, "d_g", c_top + a);
    trunk.extend(blocks);
    trunk.push(conv_out("d_out", c_last));
    trunk.push(Layer::Squash01);
    Ok(Network::assemble(
        "D",
        trunk,
        vec![],
        vec![3, cfg.resolution, cfg.resolution],
        vec![3, cfg.resolution, cfg.resolution],
        seed,
    ))
}

/// Channel multipliers of the classifier plan (times a base of 16). The
/// first `blocks` entries pace the pooled trunk, the next two the 4x4
/// convolutions, the following one the per-head convolution.
const A_MULT: &[usize] = &[1, 1, 2, 3, 4, 6, 8, 12];
const A_BASE: usize = 16;

fn a_channels(i: usize) -> usize {
    A_BASE * A_MULT[i.min(A_MULT.len() - 1)]
}

/// Image -> one logit vector per configured attribute. Shared pooled
/// trunk, then a convolutional head per attribute with dropout on its two
/// hidden dense layers.
pub fn build_attribute_classifier<T: Scalar>(
    cfg: &ModelConfig,
    seed: u64,
) -> Result<Network<T>, ModelError> {
    cfg.validate()?;
    let b_count = cfg.blocks();
    let mut trunk = Vec::new();
    let mut c_prev = 3;
    for b in 0..b_count {
        let c = a_channels(b);
        trunk.push(conv(format!("a{b}"), c_prev, c));
        trunk.push(Layer::AvgPool {
            kernel: 2,
            stride: 2,
        });
        c_prev = c;
    }
    let c0 = a_channels(b_count);
    let c1 = a_channels(b_count + 1);
    trunk.push(conv("a_p0".to_string(), c_prev, c0));
    trunk.push(conv("a_p1".to_string(), c0, c1));

    let ch = a_channels(b_count + 2);
    let heads = cfg
        .attributes
        .iter()
        .map(|attr| {
            let n = &attr.name;
            Head {
                name: n.clone(),
                layers: vec![
                    conv(format!("h_{n}"), c1, ch),
                    Layer::GlobalAvgPool,
                    Layer::Flatten,
                    dense(&format!("h_{n}_f0"), ch, ch, true),
                    Layer::Dropout { rate: DROPOUT_RATE },
                    dense(&format!("h_{n}_f1"), ch, ch, true),
                    Layer::Dropout { rate: DROPOUT_RATE },
                    dense(&format!("h_{n}_out"), ch, attr.kind.head_width(), false),
                ],
            }
        })
        .collect();
    Ok(Network::assemble(
        "A",
        trunk,
        heads,
        vec![3, cfg.resolution, cfg.resolution],
        vec![c1, 4, 4],
        seed,
    ))
}

// ---- vector mode ----------------------------------------------------
//
// For the ring experiments the data are plain 2-vectors and the latent
// mechanism is exercised without any image machinery: three dense layers
// per network, no normalization layers, no attribute conditioning.

/// 2-vector -> `2d` values on unit circles.
pub fn build_vector_encoder<T: Scalar>(d: usize, hidden: usize, seed: u64) -> Network<T> {
    assert!(d >= 1 && hidden >= 1);
    let trunk = vec![
        dense("e0", 2, hidden, true),
        dense("e1", hidden, hidden, true),
        dense("e2", hidden, 2 * d, false),
        Layer::NormalizePairs,
    ];
    Network::assemble("E", trunk, vec![], vec![2], vec![2 * d], seed)
}

/// Latent `2d`-vector -> 2-vector (unbounded coordinates).
pub fn build_vector_generator<T: Scalar>(d: usize, hidden: usize, seed: u64) -> Network<T> {
    assert!(d >= 1 && hidden >= 1);
    let trunk = vec![
        dense("g0", 2 * d, hidden, true),
        dense("g1", hidden, hidden, true),
        dense("g2", hidden, 2, false),
    ];
    Network::assemble("G", trunk, vec![], vec![2 * d], vec![2], seed)
}

/// Autoencoding critic over 2-vectors with a `2d` bottleneck.
pub fn build_vector_discriminator<T: Scalar>(d: usize, hidden: usize, seed: u64) -> Network<T> {
    assert!(d >= 1 && hidden >= 1);
    let trunk = vec![
        dense("d_e0", 2, hidden, true),
        dense("d_e1", hidden, 2 * d, false),
        dense("d_g0", 2 * d, hidden, true),
        dense("d_g1", hidden, 2, false),
    ];
    Network::assemble("D", trunk, vec![], vec![2], vec![2], seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::latent::LatentCode;
    use crate::models::{AttributeDef, ForwardOpts};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg(resolution: usize) -> ModelConfig {
        ModelConfig {
            resolution,
            d: 4,
            base_channels: 8,
            channel_cap: 64,
            attributes: vec![
                AttributeDef::categorical("shape", 2),
                AttributeDef::categorical("palette", 3),
            ],
        }
    }

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn rand_image(n: usize, res: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n * 3 * res * res)
            .map(|_| rng.random_range(0.0..1.0))
            .collect()
    }

    #[test]
    fn encoder_desk_structure() {
        let cfg = ModelConfig::desk();
        let net = build_encoder::<f64>(&cfg, 1).unwrap();
        let pools = net
            .layers()
            .filter(|l| matches!(l, Layer::AvgPool { .. }))
            .count();
        assert_eq!(pools, 3);
        let fc_width = net
            .layers()
            .find_map(|l| match l {
                Layer::Dense { out_w, .. } => Some(*out_w),
                _ => None,
            })
            .unwrap();
        assert_eq!(fc_width, 32);
    }

    #[test]
    fn encoder_full_scale_dense_width_is_100() {
        let cfg = ModelConfig::full_scale();
        let net = build_encoder::<f32>(&cfg, 1).unwrap();
        let fc_width = net
            .layers()
            .find_map(|l| match l {
                Layer::Dense { out_w, .. } => Some(*out_w),
                _ => None,
            })
            .unwrap();
        assert_eq!(fc_width, 100);
        assert_eq!(net.output_shape(), &[100]);
    }

    #[test]
    fn encoder_output_lands_on_unit_circles() {
        let cfg = tiny_cfg(16);
        let net = build_encoder::<f64>(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let x = tape.leaf_data(vec![2, 3, 16, 16], rand_image(2, 16, &mut rng), false);
        let binding = net.bind(&mut tape, true);
        let (out, _) = net.forward(&mut tape, &binding, x, &mut ForwardOpts::train());
        assert_eq!(tape.shape(out), &[2, 8]);
        for row in 0..2 {
            let vals: Vec<f64> = tape.value(out)[row * 8..(row + 1) * 8].to_vec();
            let code = LatentCode::from_values(vals);
            assert!(code.max_unit_deviation() < 1e-5, "{code:?}");
        }
    }

    #[test]
    fn generator_shape_range_and_tail() {
        let cfg = ModelConfig::desk();
        let net = build_generator::<f64>(&cfg, 5).unwrap();
        // regular blocks plus one extra smoothing upsample
        let ups = net
            .layers()
            .filter(|l| matches!(l, Layer::Upsample2))
            .count();
        assert_eq!(ups, cfg.blocks() + 1);
        assert!(matches!(
            net.layers().last(),
            Some(Layer::Squash01)
        ));

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::new();
        let in_w = cfg.latent_width() + cfg.attr_width();
        let z = tape.leaf_data(vec![2, in_w], rand_vec(2 * in_w, &mut rng), false);
        let binding = net.bind(&mut tape, true);
        let (img, _) = net.forward(&mut tape, &binding, z, &mut ForwardOpts::train());
        assert_eq!(tape.shape(img), &[2, 3, 32, 32]);
        assert!(tape
            .value(img)
            .iter()
            .all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn discriminator_bottleneck_and_unfold_arithmetic() {
        let cfg = ModelConfig::desk();
        let net = build_discriminator::<f64>(&cfg, 9).unwrap();
        let dense_widths: Vec<usize> = net
            .layers()
            .filter_map(|l| match l {
                Layer::Dense { out_w, .. } => Some(*out_w),
                _ => None,
            })
            .collect();
        // bottleneck 2d with no normalizer in between, then the unfold
        assert_eq!(dense_widths, vec![32, cfg.top_channels() * 16]);
        assert!(!net.layers().any(|l| matches!(l, Layer::NormalizePairs)));
        let concat_width = net
            .layers()
            .find_map(|l| match l {
                Layer::ConcatAttr { width } => Some(*width),
                _ => None,
            })
            .unwrap();
        assert_eq!(concat_width, cfg.attr_width());
        // first conv after the unfold consumes top + attribute channels
        let first_up_conv_in = net
            .layers()
            .skip_while(|l| !matches!(l, Layer::ConcatAttr { .. }))
            .find_map(|l| match l {
                Layer::Conv3x3 { in_c, .. } => Some(*in_c),
                _ => None,
            })
            .unwrap();
        assert_eq!(first_up_conv_in, cfg.top_channels() + cfg.attr_width());
    }

    #[test]
    fn discriminator_preserves_shape() {
        let cfg = tiny_cfg(16);
        let net = build_discriminator::<f64>(&cfg, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut tape = Tape::new();
        let x = tape.leaf_data(vec![2, 3, 16, 16], rand_image(2, 16, &mut rng), false);
        let attrs = tape.leaf_data(vec![2, 5], rand_vec(10, &mut rng), false);
        let binding = net.bind(&mut tape, true);
        let mut opts = ForwardOpts::train();
        opts.attrs = Some(attrs);
        let (out, _) = net.forward(&mut tape, &binding, x, &mut opts);
        assert_eq!(tape.shape(out), tape.shape(x));
    }

    #[test]
    fn classifier_head_widths_match_attributes() {
        let cfg = ModelConfig::desk();
        let net = build_attribute_classifier::<f64>(&cfg, 4).unwrap();
        assert_eq!(net.head_names(), vec!["age", "gender", "ethnicity"]);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut tape = Tape::new();
        let x = tape.leaf_data(vec![2, 3, 32, 32], rand_image(2, 32, &mut rng), false);
        let outs = net.eval_multi(&mut tape, x);
        assert_eq!(tape.shape(outs[0]), &[2, 10]);
        assert_eq!(tape.shape(outs[1]), &[2, 2]);
        assert_eq!(tape.shape(outs[2]), &[2, 5]);
    }

    #[test]
    fn classifier_eval_is_deterministic() {
        let cfg = tiny_cfg(16);
        let net = build_attribute_classifier::<f64>(&cfg, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let img = rand_image(2, 16, &mut rng);
        let run = |img: &[f64]| -> Vec<u64> {
            let mut tape = Tape::new();
            let x = tape.leaf_data(vec![2, 3, 16, 16], img.to_vec(), false);
            let outs = net.eval_multi(&mut tape, x);
            outs.iter()
                .flat_map(|&o| tape.value(o).iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                .collect()
        };
        assert_eq!(run(&img), run(&img));
    }

    #[test]
    fn classifier_full_scale_plan_reproduces_reference_channels() {
        let channels: Vec<usize> = (0..8).map(a_channels).collect();
        assert_eq!(channels, vec![16, 16, 32, 48, 64, 96, 128, 192]);
    }

    #[test]
    fn every_generator_parameter_gets_gradient() {
        let cfg = tiny_cfg(16);
        let net = build_generator::<f64>(&cfg, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut tape = Tape::new();
        let in_w = cfg.latent_width() + cfg.attr_width();
        let z = tape.leaf_data(vec![2, in_w], rand_vec(2 * in_w, &mut rng), false);
        let binding = net.bind(&mut tape, true);
        let (img, _) = net.forward(&mut tape, &binding, z, &mut ForwardOpts::train());
        let loss = tape.sum_all(img);
        let grads = tape.backward(loss).unwrap();
        let by_name = net.collect_grads(&grads, &binding);
        for (name, g) in by_name {
            assert!(g.iter().all(|v| v.is_finite()), "{name}: non-finite");
            assert!(
                g.iter().any(|v| *v != 0.0),
                "{name}: gradient identically zero"
            );
        }
    }

    #[test]
    fn generator_output_feeds_encoder_directly() {
        let cfg = tiny_cfg(8);
        let g = build_generator::<f64>(&cfg, 31).unwrap();
        let e = build_encoder::<f64>(&cfg, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let mut tape = Tape::new();
        let in_w = cfg.latent_width() + cfg.attr_width();
        let z = tape.leaf_data(vec![2, in_w], rand_vec(2 * in_w, &mut rng), false);
        let gb = g.bind(&mut tape, true);
        let (img, _) = g.forward(&mut tape, &gb, z, &mut ForwardOpts::train());
        let eb = e.bind(&mut tape, true);
        let (code, _) = e.forward(&mut tape, &eb, img, &mut ForwardOpts::train());
        assert_eq!(tape.shape(code), &[2, cfg.latent_width()]);
    }

    #[test]
    fn shape_audit_over_resolutions() {
        for res in [8usize, 16, 32] {
            let cfg = tiny_cfg(res);
            let e = build_encoder::<f64>(&cfg, 1).unwrap();
            let g = build_generator::<f64>(&cfg, 2).unwrap();
            let d = build_discriminator::<f64>(&cfg, 3).unwrap();
            let a = build_attribute_classifier::<f64>(&cfg, 4).unwrap();

            let n = 2;
            let mut tape = Tape::new();
            let img = tape.leaf_data(vec![n, 3, res, res], vec![0.0; n * 3 * res * res], false);
            let attrs = tape.leaf_data(vec![n, 5], vec![0.0; n * 5], false);
            let eb = e.bind(&mut tape, true);
            let (code, _) = e.forward(&mut tape, &eb, img, &mut ForwardOpts::train());
            assert_eq!(tape.shape(code)[1..], *e.output_shape());

            let z = tape.leaf_data(
                vec![n, cfg.latent_width() + 5],
                vec![0.0; n * (cfg.latent_width() + 5)],
                false,
            );
            let gb = g.bind(&mut tape, true);
            let (gen, _) = g.forward(&mut tape, &gb, z, &mut ForwardOpts::train());
            assert_eq!(tape.shape(gen)[1..], *g.output_shape());

            let db = d.bind(&mut tape, true);
            let mut opts = ForwardOpts::train();
            opts.attrs = Some(attrs);
            let (rec, _) = d.forward(&mut tape, &db, img, &mut opts);
            assert_eq!(tape.shape(rec)[1..], *d.output_shape());

            let heads = a.eval_multi(&mut tape, img);
            assert_eq!(heads.len(), 2);
            assert_eq!(tape.shape(heads[0]), &[n, 2]);
            assert_eq!(tape.shape(heads[1]), &[n, 3]);
        }
    }

    #[test]
    fn vector_networks_compose() {
        let e = build_vector_encoder::<f64>(1, 32, 41);
        let g = build_vector_generator::<f64>(1, 32, 42);
        let d = build_vector_discriminator::<f64>(1, 32, 43);
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mut tape = Tape::new();
        let x = tape.leaf_data(vec![4, 2], rand_vec(8, &mut rng), false);
        let eb = e.bind(&mut tape, true);
        let (code, _) = e.forward(&mut tape, &eb, x, &mut ForwardOpts::train());
        assert_eq!(tape.shape(code), &[4, 2]);
        for row in 0..4 {
            let v = &tape.value(code)[row * 2..row * 2 + 2];
            assert!((v[0] * v[0] + v[1] * v[1] - 1.0).abs() < 1e-6);
        }
        let gb = g.bind(&mut tape, true);
        let (back, _) = g.forward(&mut tape, &gb, code, &mut ForwardOpts::train());
        assert_eq!(tape.shape(back), &[4, 2]);
        let db = d.bind(&mut tape, true);
        let (rec, _) = d.forward(&mut tape, &db, back, &mut ForwardOpts::train());
        assert_eq!(tape.shape(rec), &[4, 2]);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = tiny_cfg(8);
        let mut net = build_generator::<f32>(&cfg, 51).unwrap();
        // push the running stats away from their init values
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let mut tape = Tape::new();
        let in_w = cfg.latent_width() + cfg.attr_width();
        let z = tape.leaf_data(
            vec![2, in_w],
            rand_vec(2 * in_w, &mut rng)
                .into_iter()
                .map(|v| v as f32)
                .collect(),
            false,
        );
        let binding = net.bind(&mut tape, true);
        let (_, ups) = net.forward(&mut tape, &binding, z, &mut ForwardOpts::train());
        net.apply_running_updates(&ups);

        let dir = std::env::temp_dir().join(format!("ucgan-model-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("g.ckpt");
        net.save(&path).unwrap();

        let mut restored = build_generator::<f32>(&cfg, 99).unwrap();
        restored.load(&path).unwrap();
        for name in net.param_names() {
            assert_eq!(
                net.param(name)
                    .data()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>(),
                restored
                    .param(name)
                    .data()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>(),
                "{name}"
            );
        }
        // running stats travel too: eval outputs agree bitwise
        let img = |net: &Network<f32>| -> Vec<u32> {
            let mut tape = Tape::new();
            let z = tape.leaf_data(vec![1, in_w], vec![0.1f32; in_w], false);
            let out = net.eval(&mut tape, z, None);
            tape.value(out).iter().map(|v| v.to_bits()).collect()
        };
        assert_eq!(img(&net), img(&restored));
        std::fs::remove_dir_all(&dir).ok();
    }
}
