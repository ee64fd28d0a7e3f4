//! Patch embedding, transformer blocks, patch merging and the
//! convolutional encoder/decoder blocks.

use std::sync::Arc;

use super::{config_err, window::window_attention, ModelConfig, Params, Result, NORM_EPS};
use crate::tensor::{Graph, Real, Tensor, Var, GATHER_ZERO};

const TO_CHANNEL_LAST: [usize; 4] = [1, 2, 3, 0];
const TO_CHANNEL_FIRST: [usize; 4] = [3, 0, 1, 2];

fn zero_bias<T: Real>(g: &mut Graph<T>, c: usize) -> Var {
    g.constant(Tensor::zeros(&[c]))
}

fn layer_norm<T: Real>(g: &mut Graph<T>, p: &Params, prefix: &str, x: Var) -> Result<Var> {
    let (gamma, beta) = (p.get(&format!("{prefix}.g"))?, p.get(&format!("{prefix}.b"))?);
    Ok(g.layer_norm(x, gamma, beta, NORM_EPS)?)
}

fn instance_norm<T: Real>(g: &mut Graph<T>, p: &Params, prefix: &str, x: Var) -> Result<Var> {
    let (gamma, beta) = (p.get(&format!("{prefix}.g"))?, p.get(&format!("{prefix}.b"))?);
    Ok(g.instance_norm(x, gamma, beta, NORM_EPS)?)
}

/// Non-overlapping `p³` patches of `x: [Cin, D, H, W]` projected to
/// `[C, ⌈D/p⌉, ⌈H/p⌉, ⌈W/p⌉]`; extents are zero-padded to multiples of `p`.
pub fn patch_embed<T: Real>(g: &mut Graph<T>, p: &Params, x: Var) -> Result<Var> {
    let w = p.get("embed.w")?;
    let k = g.shape(w)[2];
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(config_err(format!("patch_embed expects [C, D, H, W], got {s:?}")));
    }
    let pads: Vec<(usize, usize)> = s
        .iter()
        .enumerate()
        .map(|(a, &n)| if a == 0 { (0, 0) } else { (0, n.div_ceil(k) * k - n) })
        .collect();
    let xp = if pads.iter().any(|&(_, hi)| hi > 0) { g.pad(x, &pads)? } else { x };
    Ok(g.conv3d(xp, w, p.get("embed.b")?, k, 0)?)
}

/// Pre-norm transformer block on a `[D, H, W, C]` grid; odd `layer`
/// indices use shifted windows.
#[allow(clippy::too_many_arguments)]
pub fn swin_block<T: Real>(
    g: &mut Graph<T>,
    p: &Params,
    prefix: &str,
    x: Var,
    window: usize,
    heads: usize,
    layer: usize,
    use_rel_pos_bias: bool,
) -> Result<Var> {
    let h = layer_norm(g, p, &format!("{prefix}.norm1"), x)?;
    let a = window_attention(g, p, &format!("{prefix}.attn"), h, window, heads, layer % 2 == 1, use_rel_pos_bias)?;
    let x = g.add(x, a)?;
    let h = layer_norm(g, p, &format!("{prefix}.norm2"), x)?;
    let h = g.linear(h, p.get(&format!("{prefix}.mlp.fc1.w"))?, Some(p.get(&format!("{prefix}.mlp.fc1.b"))?))?;
    let h = g.gelu(h)?;
    let h = g.linear(h, p.get(&format!("{prefix}.mlp.fc2.w"))?, Some(p.get(&format!("{prefix}.mlp.fc2.b"))?))?;
    Ok(g.add(x, h)?)
}

/// All blocks of encoder stage `k` on a `[D, H, W, C]` grid.
pub fn swin_stage<T: Real>(g: &mut Graph<T>, p: &Params, cfg: &ModelConfig, k: usize, mut x: Var) -> Result<Var> {
    for l in 0..cfg.depths[k] {
        x = swin_block(
            g,
            p,
            &format!("stage{k}.block{l}"),
            x,
            cfg.window,
            cfg.heads[k],
            l,
            cfg.use_rel_pos_bias,
        )?;
    }
    Ok(x)
}

/// `[D, H, W, C]` → `[⌈D/2⌉, ⌈H/2⌉, ⌈W/2⌉, 2C]`: concatenates each 2³
/// neighbourhood (zero-padding odd extents), normalizes and projects.
pub fn patch_merging<T: Real>(g: &mut Graph<T>, p: &Params, prefix: &str, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(config_err(format!("patch_merging expects [D, H, W, C], got {s:?}")));
    }
    let (d, c) = ([s[0], s[1], s[2]], s[3]);
    let o = d.map(|n| n.div_ceil(2));
    let mut idx = Vec::with_capacity(o.iter().product::<usize>() * 8 * c);
    for z in 0..o[0] {
        for y in 0..o[1] {
            for xx in 0..o[2] {
                for j in 0..8 {
                    let src = [2 * z + (j >> 2), 2 * y + ((j >> 1) & 1), 2 * xx + (j & 1)];
                    if (0..3).all(|a| src[a] < d[a]) {
                        let base = ((src[0] * d[1] + src[1]) * d[2] + src[2]) * c;
                        idx.extend((0..c).map(|ch| (base + ch) as u32));
                    } else {
                        idx.extend(std::iter::repeat_n(GATHER_ZERO, c));
                    }
                }
            }
        }
    }
    let idx: Arc<[u32]> = idx.into();
    let merged = g.gather(x, idx, &[o[0], o[1], o[2], 8 * c])?;
    let merged = layer_norm(g, p, &format!("{prefix}.norm"), merged)?;
    Ok(g.linear(merged, p.get(&format!("{prefix}.reduce.w"))?, None)?)
}

/// Feature pyramid of a padded input `[Cin, D, H, W]`, channel-first:
/// level 0 is the input itself, level 1 the patch embedding, then one level
/// per encoder stage; the last level is the bottleneck.
pub fn encoder_forward<T: Real>(g: &mut Graph<T>, p: &Params, cfg: &ModelConfig, x: Var) -> Result<Vec<Var>> {
    let s = g.shape(x).to_vec();
    let f = cfg.downsample_factor();
    if s.len() != 4 || s[1..].iter().any(|&n| n < f) {
        return Err(config_err(format!(
            "input {s:?} is smaller than the downsampling factor {f}"
        )));
    }
    let mut levels = vec![x];
    let e = patch_embed(g, p, x)?;
    levels.push(e);
    let mut t = g.permute(e, &TO_CHANNEL_LAST)?;
    for k in 0..cfg.num_stages() {
        t = swin_stage(g, p, cfg, k, t)?;
        t = patch_merging(g, p, &format!("stage{k}.merge"), t)?;
        levels.push(g.permute(t, &TO_CHANNEL_FIRST)?);
    }
    Ok(levels)
}

/// `skip(x) + IN(conv(gelu(IN(conv(x)))))` with 3×3×3 convolutions; the
/// skip is a 1×1×1 projection when the widths differ.
pub fn residual_block<T: Real>(g: &mut Graph<T>, p: &Params, prefix: &str, x: Var) -> Result<Var> {
    let w1 = p.get(&format!("{prefix}.conv1.w"))?;
    let cout = g.shape(w1)[0];
    let b = zero_bias(g, cout);
    let h = g.conv3d(x, w1, b, 1, 1)?;
    let h = instance_norm(g, p, &format!("{prefix}.norm1"), h)?;
    let h = g.gelu(h)?;
    let h = g.conv3d(h, p.get(&format!("{prefix}.conv2.w"))?, b, 1, 1)?;
    let h = instance_norm(g, p, &format!("{prefix}.norm2"), h)?;
    let skip = if g.shape(x)[0] != cout {
        g.conv3d(x, p.get(&format!("{prefix}.proj.w"))?, b, 1, 0)?
    } else {
        x
    };
    Ok(g.add(skip, h)?)
}

/// Decoder from the bottleneck up to full resolution; returns head logits
/// `[J + 1, D, H, W]` at the padded input size.
pub fn decoder_forward<T: Real>(g: &mut Graph<T>, p: &Params, cfg: &ModelConfig, pyramid: &[Var]) -> Result<Var> {
    let n = cfg.num_stages();
    if pyramid.len() != n + 2 {
        return Err(config_err(format!(
            "pyramid has {} levels, expected {}",
            pyramid.len(),
            n + 2
        )));
    }
    let mut skips = Vec::with_capacity(n + 2);
    for (i, &level) in pyramid.iter().enumerate() {
        skips.push(residual_block(g, p, &format!("enc{i}"), level)?);
    }
    let mut h = skips[n + 1];
    for i in (0..=n).rev() {
        let up = g.conv_transpose3d(h, p.get(&format!("dec{i}.up.w"))?, p.get(&format!("dec{i}.up.b"))?, 2)?;
        if g.shape(up)[1..] != g.shape(skips[i])[1..] {
            return Err(config_err(format!(
                "decoder level {i}: upsampled {:?} does not match skip {:?}",
                g.shape(up),
                g.shape(skips[i])
            )));
        }
        let cat = g.concat(&[up, skips[i]], 0)?;
        h = residual_block(g, p, &format!("dec{i}.block"), cat)?;
    }
    Ok(g.conv3d(h, p.get("head.w")?, p.get("head.b")?, 1, 0)?)
}
