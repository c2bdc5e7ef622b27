//! JSON wire formats shared with HTTP clients: run-length masks and
//! base64-encoded PNG images.

use crate::error::{Error, Result};
use crate::imageio;
use crate::sketchrep::{Image, Raster};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

/// Row-major binary mask as alternating run lengths, starting with a run of
/// zeros (possibly empty). The counts sum to `width·height`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunLength {
    pub width: usize,
    pub height: usize,
    pub counts: Vec<usize>,
}

impl RunLength {
    pub fn encode(r: &Raster) -> Self {
        let mut counts = Vec::new();
        let mut cur = false;
        let mut run = 0;
        for &v in r.data() {
            let on = v >= 0.5;
            if on != cur {
                counts.push(run);
                run = 0;
                cur = on;
            }
            run += 1;
        }
        counts.push(run);
        Self { width: r.width(), height: r.height(), counts }
    }

    pub fn decode(&self) -> Result<Raster> {
        let n = self.width.checked_mul(self.height).ok_or_else(|| Error::InvalidArgument("mask size overflows".into()))?;
        if self.width == 0 || self.height == 0 || self.counts.iter().sum::<usize>() != n {
            return Err(Error::InvalidArgument(format!("run lengths sum to {}, mask has {n} cells", self.counts.iter().sum::<usize>())));
        }
        let mut data = Vec::with_capacity(n);
        for (i, &c) in self.counts.iter().enumerate() {
            data.extend(std::iter::repeat_n(if i % 2 == 1 { 1.0 } else { 0.0 }, c));
        }
        Raster::from_vec(self.width, self.height, data)
    }
}

pub fn image_to_base64(img: &Image) -> Result<String> {
    Ok(STANDARD.encode(imageio::encode_image(img)?))
}

pub fn image_from_base64(s: &str) -> Result<Image> {
    let bytes = STANDARD.decode(s.trim()).map_err(|e| Error::Image(format!("base64: {e}")))?;
    imageio::decode_image(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn run_length_examples() {
        let r = Raster::from_vec(3, 2, vec![1.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let rl = RunLength::encode(&r);
        assert_eq!(rl.counts, vec![0, 2, 3, 1]);
        assert_eq!(rl.decode().unwrap(), r);
        assert_eq!(RunLength::encode(&Raster::new(2, 2)).counts, vec![4]);
        assert!(RunLength { width: 2, height: 2, counts: vec![3] }.decode().is_err());
        assert!(RunLength { width: 0, height: 2, counts: vec![] }.decode().is_err());
    }

    #[test]
    fn base64_png_round_trip() {
        let img = Image::filled(4, 4, [0.2, 0.4, 1.0]);
        let back = image_from_base64(&image_to_base64(&img).unwrap()).unwrap();
        assert_eq!(back, img);
        assert!(image_from_base64("!!!").is_err());
    }

    proptest! {
        #[test]
        fn run_length_round_trips(w in 1usize..12, h in 1usize..12, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let r = Raster::from_vec(w, h, (0..w * h).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect()).unwrap();
            let rl = RunLength::encode(&r);
            prop_assert_eq!(rl.counts.iter().sum::<usize>(), w * h);
            prop_assert_eq!(rl.decode().unwrap(), r);
        }
    }
}
