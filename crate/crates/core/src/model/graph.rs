//! Batched forward graphs. Rows index samples (or sample/latent pairs).

use crate::autodiff::{Array2, AutodiffError, Tape, Var};
use crate::dataio::{Point, OBS_LEN, PRED_LEN};

use super::ParamVars;

struct GruCell {
    wx: Var,
    wh: Var,
    bx: Var,
    bh: Var,
    hidden: usize,
}

impl GruCell {
    /// `z = σ(.)`, `r = σ(.)`, `n = tanh(x Wn + bn + r ⊙ (h Un + cn))`,
    /// `h' = n + z ⊙ (h - n)`.
    fn step(&self, t: &mut Tape, x: Var, h: Var) -> Result<Var, AutodiffError> {
        let hs = self.hidden;
        let gx = t.matmul(x, self.wx)?;
        let gx = t.add(gx, self.bx)?;
        let gh = t.matmul(h, self.wh)?;
        let gh = t.add(gh, self.bh)?;
        let gx_zr = t.slice_cols(gx, 0..2 * hs)?;
        let gh_zr = t.slice_cols(gh, 0..2 * hs)?;
        let zr = t.add(gx_zr, gh_zr)?;
        let zr = t.sigmoid(zr);
        let z = t.slice_cols(zr, 0..hs)?;
        let r = t.slice_cols(zr, hs..2 * hs)?;
        let gx_n = t.slice_cols(gx, 2 * hs..3 * hs)?;
        let gh_n = t.slice_cols(gh, 2 * hs..3 * hs)?;
        let rn = t.mul(r, gh_n)?;
        let n = t.add(gx_n, rn)?;
        let n = t.tanh(n);
        let diff = t.sub(h, n)?;
        let gated = t.mul(z, diff)?;
        t.add(n, gated)
    }
}

/// Per-step displacement inputs, one `rows × 2` array per step. The first
/// step of a history has no predecessor and gets a zero displacement.
pub fn displacement_steps<const N: usize>(tracks: &[&[Point; N]], start: Option<&[Point]>) -> Vec<Array2> {
    (0..N)
        .map(|step| {
            let mut arr = Array2::zeros(tracks.len(), 2);
            for (row, track) in tracks.iter().enumerate() {
                let prev = if step > 0 { Some(track[step - 1]) } else { start.map(|s| s[row]) };
                if let Some(prev) = prev {
                    arr.set(row, 0, track[step][0] - prev[0]);
                    arr.set(row, 1, track[step][1] - prev[1]);
                }
            }
            arr
        })
        .collect()
}

fn run_encoder(t: &mut Tape, cell: &GruCell, steps: &[Array2], out_w: Var, out_b: Var) -> Result<Var, AutodiffError> {
    let rows = steps.first().map_or(0, |s| s.rows());
    let mut h = t.constant(Array2::zeros(rows, cell.hidden));
    for s in steps {
        let x = t.constant(s.clone());
        h = cell.step(t, x, h)?;
    }
    let y = t.matmul(h, out_w)?;
    let y = t.add(y, out_b)?;
    Ok(t.tanh(y))
}

/// History embedding `f`, `B × d_f`.
pub fn encode_history(t: &mut Tape, p: &ParamVars, obs: &[&[Point; OBS_LEN]]) -> Result<Var, AutodiffError> {
    let hidden = t.value(p.enc_wh).rows();
    let cell = GruCell { wx: p.enc_wx, wh: p.enc_wh, bx: p.enc_bx, bh: p.enc_bh, hidden };
    let steps = displacement_steps(obs, None);
    run_encoder(t, &cell, &steps, p.enc_out_w, p.enc_out_b)
}

/// Future embedding `g`, `B × d_g`. Displacements are taken relative to the
/// last observed position, which is the origin after normalization.
pub fn encode_future(t: &mut Tape, p: &ParamVars, fut: &[&[Point; PRED_LEN]]) -> Result<Var, AutodiffError> {
    let hidden = t.value(p.fut_wh).rows();
    let cell = GruCell { wx: p.fut_wx, wh: p.fut_wh, bx: p.fut_bx, bh: p.fut_bh, hidden };
    let origin = vec![[0.0, 0.0]; fut.len()];
    let steps = displacement_steps(fut, Some(&origin));
    run_encoder(t, &cell, &steps, p.fut_out_w, p.fut_out_b)
}

/// Prior logits `B × K` from `f`.
pub fn prior_logits(t: &mut Tape, p: &ParamVars, f: Var) -> Result<Var, AutodiffError> {
    let l = t.matmul(f, p.prior_w)?;
    t.add(l, p.prior_b)
}

/// Posterior logits `B × K` from `[f, g]`.
pub fn posterior_logits(t: &mut Tape, p: &ParamVars, f: Var, g: Var) -> Result<Var, AutodiffError> {
    let fg = t.concat_cols(f, g)?;
    let l = t.matmul(fg, p.post_w)?;
    t.add(l, p.post_b)
}

/// Decodes one trajectory per `(row of f, latent index)` pair. Returns
/// the 12 predicted positions, each `pairs.len() × 2`.
pub fn decode_pairs(t: &mut Tape, p: &ParamVars, f: Var, pairs: &[(usize, usize)]) -> Result<Vec<Var>, AutodiffError> {
    let hidden = t.value(p.dec_wh).rows();
    let cell = GruCell { wx: p.dec_wx, wh: p.dec_wh, bx: p.dec_bx, bh: p.dec_bh, hidden };
    let f_rep = t.gather_rows(f, pairs.iter().map(|&(row, _)| row).collect())?;
    let z_emb = t.gather_rows(p.latent_embed, pairs.iter().map(|&(_, z)| z).collect())?;
    let init = t.concat_cols(f_rep, z_emb)?;
    let h0 = t.matmul(init, p.dec_init_w)?;
    let h0 = t.add(h0, p.dec_init_b)?;
    let mut h = t.tanh(h0);
    let mut x = t.constant(Array2::zeros(pairs.len(), 2));
    let mut pos: Option<Var> = None;
    let mut out = Vec::with_capacity(PRED_LEN);
    for _ in 0..PRED_LEN {
        h = cell.step(t, x, h)?;
        let d = t.matmul(h, p.dec_out_w)?;
        let d = t.add(d, p.dec_out_b)?;
        let next = match pos {
            Some(prev) => t.add(prev, d)?,
            None => d,
        };
        out.push(next);
        pos = Some(next);
        x = d;
    }
    Ok(out)
}

/// Every `(row, z)` pair for `rows` samples, row-major: `row * K + z`.
pub fn all_pairs(rows: usize, k: usize) -> Vec<(usize, usize)> {
    (0..rows).flat_map(|r| (0..k).map(move |z| (r, z))).collect()
}

/// `0.5 Σ_t ||fut_t - pos_t||²` per pair, as a `pairs × 1` column.
pub fn recon_nll_pairs(
    t: &mut Tape,
    positions: &[Var],
    fut: &[&[Point; PRED_LEN]],
    pairs: &[(usize, usize)],
) -> Result<Var, AutodiffError> {
    let mut total: Option<Var> = None;
    for (step, &pos) in positions.iter().enumerate() {
        let mut target = Array2::zeros(pairs.len(), 2);
        for (i, &(row, _)) in pairs.iter().enumerate() {
            target.set(i, 0, fut[row][step][0]);
            target.set(i, 1, fut[row][step][1]);
        }
        let target = t.constant(target);
        let err = t.sub(pos, target)?;
        let sq = t.square(err);
        let per_pair = t.row_sum(sq);
        total = Some(match total {
            Some(acc) => t.add(acc, per_pair)?,
            None => per_pair,
        });
    }
    let total = total.expect("non-empty horizon");
    Ok(t.scale(total, 0.5))
}

/// Converts decoded step variables into per-pair trajectories.
pub fn trajectories(t: &Tape, positions: &[Var]) -> Vec<[Point; PRED_LEN]> {
    let rows = positions.first().map_or(0, |&v| t.value(v).rows());
    (0..rows)
        .map(|r| {
            let mut traj = [[0.0; 2]; PRED_LEN];
            for (step, &v) in positions.iter().enumerate() {
                let a = t.value(v);
                traj[step] = [a.get(r, 0), a.get(r, 1)];
            }
            traj
        })
        .collect()
}
