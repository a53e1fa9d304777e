//! Parameter and compute accounting against shape enumeration.

use clipladder_core::model::{
    build_tower, count_parameters, forward_gflops, forward_macs, forward_macs_for_tokens, NormKind, TowerConfig, TowerInput,
};

/// Every tensor of a tower written out from the architecture: embeddings,
/// `layers` pre-norm blocks (norm, q/k/v/out, norm, two-layer MLP), final
/// norm and projection.
fn enumerate_shapes(c: &TowerConfig) -> Vec<Vec<usize>> {
    let d = c.width;
    let h = d * c.mlp_ratio;
    let norm: Vec<Vec<usize>> = match c.norm_kind {
        NormKind::Rms => vec![vec![d]],
        NormKind::Layer => vec![vec![d], vec![d]],
    };
    let mut out = Vec::new();
    match c.input {
        TowerInput::Vision { patch_size, input_resolution, channels } => {
            let g = input_resolution / patch_size;
            out.push(vec![patch_size * patch_size * channels, d]);
            out.push(vec![d]);
            out.push(vec![d]);
            out.push(vec![g * g + 1, d]);
        }
        TowerInput::Text { vocab_size, context_length, .. } => {
            out.push(vec![vocab_size, d]);
            out.push(vec![context_length, d]);
        }
    }
    for _ in 0..c.layers {
        out.extend(norm.iter().cloned());
        for _ in 0..3 {
            out.push(vec![d, d]);
            if c.qkv_bias {
                out.push(vec![d]);
            }
        }
        out.push(vec![d, d]);
        out.push(vec![d]);
        out.extend(norm.iter().cloned());
        out.extend([vec![d, h], vec![h], vec![h, d], vec![d]]);
    }
    out.extend(norm.iter().cloned());
    out.push(vec![d, c.projection_dim]);
    out
}

fn toy_configs() -> Vec<TowerConfig> {
    let mut with_bias = TowerConfig::vision(2, 24, 3, 4, 16, 12);
    with_bias.qkv_bias = true;
    with_bias.norm_kind = NormKind::Layer;
    vec![
        TowerConfig::vision(0, 8, 2, 4, 8, 4),
        TowerConfig::vision(2, 32, 2, 8, 32, 32),
        TowerConfig::vision(3, 48, 4, 8, 32, 32),
        TowerConfig::vision(4, 64, 4, 8, 32, 32),
        with_bias,
        TowerConfig::text(2, 32, 2, 139, 16, 32),
        TowerConfig::text(1, 16, 4, 50, 8, 8),
    ]
}

#[test]
pub fn toy_counts_match_enumeration_and_built_weights() {
    for c in toy_configs() {
        let enumerated: usize = enumerate_shapes(&c).iter().map(|s| s.iter().product::<usize>()).sum();
        let built = build_tower(&c, 0).unwrap();
        assert_eq!(count_parameters(&c), enumerated as u64, "{c:?}");
        assert_eq!(built.element_count(), enumerated, "{c:?}");
        let mut built_shapes: Vec<Vec<usize>> = built.iter().map(|(_, t)| t.shape().to_vec()).collect();
        let mut shapes = enumerate_shapes(&c);
        built_shapes.sort();
        shapes.sort();
        assert_eq!(built_shapes, shapes);
    }
}

#[test]
pub fn large_text_tower_is_about_695m() {
    let c = TowerConfig::large_text_tower();
    assert_eq!((c.layers, c.width, c.heads), (32, 1280, 20));
    let n = count_parameters(&c) as f64;
    assert!((n / 695e6 - 1.0).abs() <= 0.02, "{n}");
}

/// Multiply-accumulates of the matmuls one sample passes through.
fn enumerate_macs(c: &TowerConfig, tokens: usize) -> u64 {
    let (d, h, l) = (c.width as u64, (c.width * c.mlp_ratio) as u64, tokens as u64);
    let mut macs = 0;
    if let TowerInput::Vision { patch_size, channels, .. } = c.input {
        let n = c.num_patches().unwrap() as u64;
        macs += n * (patch_size * patch_size * channels) as u64 * d;
    }
    for _ in 0..c.layers {
        macs += 3 * l * d * d; // q, k, v
        macs += l * l * d; // scores over all heads
        macs += l * l * d; // weighted values
        macs += l * d * d; // output
        macs += l * d * h + l * h * d;
    }
    macs + d * c.projection_dim as u64
}

#[test]
pub fn flops_match_matmul_enumeration() {
    for c in toy_configs() {
        assert_eq!(forward_macs(&c), enumerate_macs(&c, c.sequence_length()), "{c:?}");
        assert_eq!(forward_macs_for_tokens(&c, 5), enumerate_macs(&c, 5));
        assert_eq!(forward_gflops(&c), 2.0 * forward_macs(&c) as f64 / 1e9);
    }
}

#[test]
pub fn fewer_tokens_cost_less() {
    let c = TowerConfig::vision(4, 64, 4, 8, 32, 32);
    assert!(forward_macs_for_tokens(&c, 9) < forward_macs(&c));
}
