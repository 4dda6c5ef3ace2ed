use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};
use crate::tensor::{concat0, Tensor};

use super::{ModelParams, LEAKY_SLOPE};

/// Everything one differentiable pass produces.  The tensors keep the graph
/// alive, so any loss built from them can be backpropagated.
#[derive(Debug, Clone)]
pub struct ForwardOutputs<S: Scalar> {
    /// Per-pixel probability maps `[M, H, W]`; channel 0 is background.
    pub maps: Tensor<S>,
    /// Image-level label probabilities `[labels]` from the max-pooling head.
    pub probs: Tensor<S>,
    /// Auxiliary label probabilities `[labels]` from the encoder alone.
    pub aux: Tensor<S>,
    /// Auxiliary probabilities on the occluded image; trained towards zero.
    pub occluded_aux: Tensor<S>,
    /// Spatial maximum of every map `[M]` (background included).
    pub intensities: Tensor<S>,
    /// First (row-major) maximizing pixel `(x, y)` per map.
    pub peaks: Vec<(usize, usize)>,
    /// The occlusion `image * background_map`.
    pub occluded: Tensor<S>,
}

impl<S: Scalar> ModelParams<S> {
    fn check_input(&self, img: &Tensor<S>) -> Result<()> {
        let cfg = self.config();
        let div = 1usize << cfg.depth();
        match *img.shape() {
            [ch, h, w] if ch == cfg.in_channels && h % div == 0 && w % div == 0 && h > 0 && w > 0 => {
                Ok(())
            }
            _ => Err(Error::Shape(format!(
                "input must be [{}, H, W] with H, W divisible by {}, got {:?}",
                cfg.in_channels,
                div,
                img.shape()
            ))),
        }
    }

    /// Per-stage encoder features, coarsest last.
    fn encode(&self, img: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
        let slope = c::<S>(LEAKY_SLOPE);
        let mut feats = Vec::with_capacity(self.encoder.len());
        let mut x = img.clone();
        for stage in &self.encoder {
            x = x.conv2d(&stage.w, &stage.b, 2, 1)?.leaky_relu(slope);
            feats.push(x.clone());
        }
        Ok(feats)
    }

    /// Feature-pyramid decoder: lateral 1x1 projections, top-down nearest
    /// upsample-and-add, per-level `M`-channel heads, then upsample all levels
    /// to input size, concatenate, fuse and softmax.
    fn decode(&self, feats: &[Tensor<S>]) -> Result<Tensor<S>> {
        let slope = c::<S>(LEAKY_SLOPE);
        let depth = feats.len();
        let laterals: Vec<Tensor<S>> = feats
            .iter()
            .zip(&self.lateral)
            .map(|(f, l)| f.conv2d(&l.w, &l.b, 1, 0))
            .collect::<Result<_>>()?;
        let mut merged = vec![laterals[depth - 1].clone()];
        for i in (0..depth - 1).rev() {
            let up = merged.last().unwrap().upsample_nearest(2)?;
            merged.push(laterals[i].add(&up)?);
        }
        merged.reverse(); // finest first again
        let mut level_maps = Vec::with_capacity(depth);
        for (i, m) in merged.iter().enumerate() {
            let head = &self.level_head[i];
            let lm = m.leaky_relu(slope).conv2d(&head.w, &head.b, 1, 1)?;
            level_maps.push(lm.upsample_nearest(1 << (i + 1))?);
        }
        let stacked = concat0(&level_maps)?;
        let logits = stacked.conv2d(&self.fuse.w, &self.fuse.b, 1, 1)?;
        logits.softmax_channels()
    }

    /// Probability maps `[M, H, W]` for an input image.
    pub fn forward_segment(&self, img: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_input(img)?;
        let feats = self.encode(img)?;
        self.decode(&feats)
    }

    /// Label probabilities from probability maps: the background map is
    /// excluded, so predictions depend only on the foreground maxima, and the
    /// squared weights mean more lesion evidence can never lower a label.
    pub fn forward_classify(
        &self,
        maps: &Tensor<S>,
    ) -> Result<(Tensor<S>, Tensor<S>, Vec<(usize, usize)>)> {
        let m = self.config().maps;
        if maps.shape().first() != Some(&m) || maps.shape().len() != 3 {
            return Err(Error::Shape(format!(
                "expected [{m}, H, W] probability maps, got {:?}",
                maps.shape()
            )));
        }
        let (pooled, peaks) = maps.global_max_pool()?;
        let fg = pooled.narrow0(1, m - 1)?;
        let w2 = self.head_w_raw.square();
        let probs = fg.dense(&w2, &self.head_b)?.sigmoid();
        Ok((probs, pooled, peaks))
    }

    fn aux_head(&self, top: &Tensor<S>) -> Result<Tensor<S>> {
        let pooled = top.global_avg_pool()?;
        Ok(pooled.dense(&self.aux_w, &self.aux_b)?.sigmoid())
    }

    /// Auxiliary label probabilities straight from the encoder.
    pub fn forward_aux(&self, img: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_input(img)?;
        let feats = self.encode(img)?;
        self.aux_head(feats.last().unwrap())
    }

    /// Multiply every channel of `img` by the background map of `maps`.
    /// Differentiable in both factors; with a perfect segmentation the result
    /// looks like a healthy image.
    pub fn occlude(img: &Tensor<S>, maps: &Tensor<S>) -> Result<Tensor<S>> {
        let background = maps.narrow0(0, 1)?;
        img.mul_channel_broadcast(&background)
    }

    /// Full differentiable pass: segmentation, both heads, and the auxiliary
    /// head re-run on the occluded image.  The encoder pass over `img` is
    /// shared between the decoder and the auxiliary head.
    pub fn forward_full(&self, img: &Tensor<S>) -> Result<ForwardOutputs<S>> {
        self.check_input(img)?;
        let feats = self.encode(img)?;
        let maps = self.decode(&feats)?;
        let (probs, intensities, peaks) = self.forward_classify(&maps)?;
        let aux = self.aux_head(feats.last().unwrap())?;
        let occluded = Self::occlude(img, &maps)?;
        let occ_feats = self.encode(&occluded)?;
        let occluded_aux = self.aux_head(occ_feats.last().unwrap())?;
        Ok(ForwardOutputs {
            maps,
            probs,
            aux,
            occluded_aux,
            intensities,
            peaks,
            occluded,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::ModelConfig;
    use super::*;
    use crate::tensor::finite_difference;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            maps: 3,
            labels: 2,
            input: (16, 16),
            in_channels: 1,
            encoder_widths: vec![4, 8],
            decoder_width: 4,
            seed: 7,
        }
    }

    fn ramp_image(cfg: &ModelConfig) -> Tensor<f64> {
        let (h, w) = cfg.input;
        let n = cfg.in_channels * h * w;
        let data = (0..n).map(|i| 0.5 + 0.4 * (i as f64 * 0.61).sin()).collect();
        Tensor::leaf(&[cfg.in_channels, h, w], data).unwrap()
    }

    #[test]
    fn zeroed_fuse_produces_uniform_maps() {
        let cfg = tiny_cfg();
        let mut params = ModelParams::<f64>::init(&cfg).unwrap();
        params.fuse.w = Tensor::zeros(params.fuse.w.shape());
        params.fuse.b = Tensor::zeros(params.fuse.b.shape());
        let maps = params.forward_segment(&ramp_image(&cfg)).unwrap();
        assert_eq!(maps.shape(), &[3, 16, 16]);
        for &v in maps.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12, "zero logits mean uniform maps");
        }
    }

    #[test]
    fn fresh_maps_start_near_uniform_but_not_channel_symmetric() {
        let cfg = tiny_cfg();
        let params = ModelParams::<f64>::init(&cfg).unwrap();
        let maps = params.forward_segment(&ramp_image(&cfg)).unwrap();
        for &v in maps.data() {
            assert!((v - 1.0 / 3.0).abs() < 0.15, "fresh maps should stay close to uniform, got {v}");
        }
        // identical channels would receive identical gradients forever
        let hw = 16 * 16;
        let c1 = &maps.data()[hw..2 * hw];
        let c2 = &maps.data()[2 * hw..3 * hw];
        assert!(c1.iter().zip(c2).any(|(a, b)| (a - b).abs() > 1e-9));
        let raw = params.head_w_raw.data();
        assert!(raw.iter().all(|&w| (0.05..0.15).contains(&w)));
        assert!(raw.windows(2).any(|p| (p[0] - p[1]).abs() > 1e-9));
    }

    #[test]
    fn map_channels_sum_to_one() {
        let cfg = tiny_cfg();
        let mut cfg = cfg;
        cfg.seed = 99;
        let params = ModelParams::<f64>::init(&cfg).unwrap();
        // push the fuse layer off zero so the maps are non-trivial
        let jitter: Vec<f64> = (0..params.fuse.w.numel())
            .map(|i| (i as f64 * 0.37).sin() * 0.3)
            .collect();
        let mut params = params;
        params.fuse.w = Tensor::leaf(params.fuse.w.shape(), jitter).unwrap();
        let maps = params.forward_segment(&ramp_image(&cfg)).unwrap();
        let hw = 16 * 16;
        for p in 0..hw {
            let s: f64 = (0..3).map(|m| maps.data()[m * hw + p]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn classification_sees_only_foreground_maxima() {
        let cfg = tiny_cfg();
        let params = ModelParams::<f64>::init(&cfg).unwrap();
        // two map tensors with identical foreground maxima but different
        // background channels must classify identically
        let hw = 16 * 16;
        let mut a = vec![0.1; 3 * hw];
        let mut b = vec![0.05; 3 * hw];
        a[hw + 3] = 0.8; // map 1 peak
        b[hw + 70] = 0.8;
        a[2 * hw + 5] = 0.6; // map 2 peak
        b[2 * hw + 9] = 0.6;
        let pa = Tensor::leaf(&[3, 16, 16], a).unwrap();
        let pb = Tensor::leaf(&[3, 16, 16], b).unwrap();
        let (ca, _, _) = params.forward_classify(&pa).unwrap();
        let (cb, _, _) = params.forward_classify(&pb).unwrap();
        for (x, y) in ca.data().iter().zip(cb.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_foreground_collapses_to_bias() {
        let cfg = tiny_cfg();
        let params = ModelParams::<f64>::init(&cfg).unwrap();
        let maps = Tensor::leaf(&[3, 16, 16], {
            let hw = 16 * 16;
            let mut d = vec![0.0; 3 * hw];
            for v in d[..hw].iter_mut() {
                *v = 1.0; // all background
            }
            d
        })
        .unwrap();
        let (probs, _, _) = params.forward_classify(&maps).unwrap();
        let expected = 1.0 / (1.0 + 2.0f64.exp()); // sigmoid(-2)
        for &p in probs.data() {
            assert!((p - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn head_weights_act_squared_and_sign_blind() {
        let cfg = tiny_cfg();
        let mut pos = ModelParams::<f64>::init(&cfg).unwrap();
        let mut neg = pos.clone();
        let raw: Vec<f64> = vec![0.7, -0.3, 0.2, 0.9];
        pos.head_w_raw = Tensor::leaf(&[2, 2], raw.clone()).unwrap();
        neg.head_w_raw = Tensor::leaf(&[2, 2], raw.iter().map(|v| -v).collect()).unwrap();
        let maps = {
            let hw = 16 * 16;
            let mut d = vec![0.2; 3 * hw];
            d[hw] = 0.9;
            d[2 * hw + 17] = 0.5;
            Tensor::leaf(&[3, 16, 16], d).unwrap()
        };
        let (pp, _, _) = pos.forward_classify(&maps).unwrap();
        let (pn, _, _) = neg.forward_classify(&maps).unwrap();
        assert_eq!(pp.data(), pn.data());
    }

    #[test]
    fn monotone_in_foreground_evidence() {
        let cfg = tiny_cfg();
        let params = ModelParams::<f64>::init(&cfg).unwrap();
        let hw = 16 * 16;
        let mut low = vec![0.1; 3 * hw];
        low[hw + 4] = 0.3;
        let mut high = low.clone();
        high[hw + 4] = 0.7; // raise one foreground maximum
        let (pl, _, _) = params
            .forward_classify(&Tensor::leaf(&[3, 16, 16], low).unwrap())
            .unwrap();
        let (ph, _, _) = params
            .forward_classify(&Tensor::leaf(&[3, 16, 16], high).unwrap())
            .unwrap();
        for (l, h) in pl.data().iter().zip(ph.data()) {
            assert!(h >= l, "more evidence must never lower a label ({l} -> {h})");
        }
    }

    #[test]
    fn occlusion_identities_are_exact() {
        let cfg = tiny_cfg();
        let img = ramp_image(&cfg);
        let hw = 16 * 16;
        let mut all_bg = vec![0.0; 3 * hw];
        all_bg[..hw].fill(1.0);
        let maps = Tensor::leaf(&[3, 16, 16], all_bg).unwrap();
        let occ = ModelParams::occlude(&img, &maps).unwrap();
        assert_eq!(occ.data(), img.data());

        let mut no_bg = vec![0.5; 3 * hw];
        no_bg[..hw].fill(0.0);
        let maps = Tensor::leaf(&[3, 16, 16], no_bg).unwrap();
        let occ = ModelParams::occlude(&img, &maps).unwrap();
        assert!(occ.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zeroed_fuse_occludes_to_uniform_fraction() {
        let cfg = tiny_cfg();
        let mut params = ModelParams::<f64>::init(&cfg).unwrap();
        params.fuse.w = Tensor::zeros(params.fuse.w.shape());
        params.fuse.b = Tensor::zeros(params.fuse.b.shape());
        let img = ramp_image(&cfg);
        let out = params.forward_full(&img).unwrap();
        // uniform maps -> background = 1/M everywhere -> occlusion = img / M
        for (o, i) in out.occluded.data().iter().zip(img.data()) {
            assert!((o - i / 3.0).abs() < 1e-12);
        }
        for &p in out.probs.data().iter().chain(out.aux.data()) {
            assert!(p > 0.0 && p < 1.0);
        }
        assert_eq!(out.peaks.len(), 3);
    }

    #[test]
    fn occlusion_branch_reaches_decoder_parameters() {
        // gradient of the occluded-aux output must flow into the fuse layer
        // through the background map: no stop-gradient anywhere
        let cfg = tiny_cfg();
        let mut params = ModelParams::<f64>::init(&cfg).unwrap();
        let jitter: Vec<f64> = (0..params.fuse.w.numel())
            .map(|i| (i as f64 * 0.41).cos() * 0.2)
            .collect();
        params.fuse.w = Tensor::leaf(params.fuse.w.shape(), jitter).unwrap();
        let au_w: Vec<f64> = (0..params.aux_w.numel())
            .map(|i| (i as f64 * 0.13).sin() * 0.4)
            .collect();
        params.aux_w = Tensor::leaf(params.aux_w.shape(), au_w).unwrap();
        let img = ramp_image(&cfg);
        let out = params.forward_full(&img).unwrap();
        let loss = out.occluded_aux.square().sum_all();
        let grads = loss.backward().unwrap();
        let gf = grads.wrt(&params.fuse.w).unwrap();
        assert!(
            gf.iter().any(|&v| v.abs() > 0.0),
            "occlusion loss must influence the segmentation decoder"
        );
    }

    #[test]
    fn shift_by_total_stride_shifts_maps() {
        let cfg = ModelConfig {
            maps: 3,
            labels: 2,
            input: (32, 32),
            in_channels: 1,
            encoder_widths: vec![4, 8],
            decoder_width: 4,
            seed: 7,
        };
        let mut params = ModelParams::<f64>::init(&cfg).unwrap();
        let jitter: Vec<f64> = (0..params.fuse.w.numel())
            .map(|i| (i as f64 * 0.29).sin() * 0.3)
            .collect();
        params.fuse.w = Tensor::leaf(params.fuse.w.shape(), jitter).unwrap();
        let (h, w) = (32, 32);
        let shift = 4; // 2^depth
        let base: Vec<f64> = (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                0.5 + 0.3 * ((x as f64 * 0.9).sin() * (y as f64 * 0.7).cos())
            })
            .collect();
        let mut shifted = vec![0.5; h * w];
        for y in 0..h {
            for x in shift..w {
                shifted[y * w + x] = base[y * w + x - shift];
            }
        }
        let pa = params
            .forward_segment(&Tensor::leaf(&[1, h, w], base).unwrap())
            .unwrap();
        let pb = params
            .forward_segment(&Tensor::leaf(&[1, h, w], shifted).unwrap())
            .unwrap();
        // compare interior: map(x) vs shifted map(x + shift)
        let hw = h * w;
        let band = 10;
        let mut va = Vec::new();
        let mut vb = Vec::new();
        for m in 0..3 {
            for y in band..h - band {
                for x in band..w - band - shift {
                    va.push(pa.data()[m * hw + y * w + x]);
                    vb.push(pb.data()[m * hw + y * w + x + shift]);
                }
            }
        }
        let corr = correlation(&va, &vb);
        assert!(corr > 0.99, "interior correlation {corr}");
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let mut num = 0.0;
        let mut da = 0.0;
        let mut db = 0.0;
        for (x, y) in a.iter().zip(b) {
            num += (x - ma) * (y - mb);
            da += (x - ma).powi(2);
            db += (y - mb).powi(2);
        }
        num / (da.sqrt() * db.sqrt())
    }

    #[test]
    fn aux_head_gradient_matches_finite_differences() {
        let cfg = tiny_cfg();
        let params = ModelParams::<f64>::init(&cfg).unwrap();
        let img = ramp_image(&cfg);
        let w0 = params.encoder[0].w.clone();
        let aux_w: Vec<f64> = (0..params.aux_w.numel())
            .map(|i| (i as f64 * 0.23).sin() * 0.5)
            .collect();
        let aux_w = Tensor::leaf(params.aux_w.shape(), aux_w).unwrap();
        let leaves = [w0, aux_w];
        let f = |l: &[Tensor<f64>]| {
            let mut p = params.clone();
            p.encoder[0].w = l[0].clone();
            p.aux_w = l[1].clone();
            Ok(p.forward_aux(&img)?.sum_all())
        };
        let loss = f(&leaves).unwrap();
        let grads = loss.backward().unwrap();
        let numeric = finite_difference(f, &leaves, 1e-6).unwrap();
        for (leaf, num) in leaves.iter().zip(&numeric) {
            let ana = grads.wrt(leaf).unwrap();
            for (a, n) in ana.iter().zip(num) {
                let denom = n.abs().max(1e-8);
                assert!(
                    ((a - n).abs() / denom) < 1e-4 || (a - n).abs() < 1e-10,
                    "auxiliary-path gradient {a} vs {n}"
                );
            }
        }
    }
}
