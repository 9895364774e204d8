//! Full-size layout: one forward pass at 224×224 and the parameter budget.

use std::time::Instant;

use wavray::model::{param_count, ModelConfig};
use wavray::params::{init_rng, ParamBuilder, ParamStore};
use wavray::ray::{RayEncoder, RayEncoderConfig};
use wavray::wavelet::{Backbone, BackboneConfig};
use wavray::{Tape, Tensor};

#[test]
fn full_backbone_and_encoder_shapes() {
    let start = Instant::now();
    let cfg = BackboneConfig::full();
    let mut store = ParamStore::<f32>::new();
    let mut rng = init_rng(0);
    let mut b = ParamBuilder::new(&mut store, &mut rng);
    let backbone = Backbone::new(&mut b.scope("backbone"), &cfg).unwrap();
    let encoder = RayEncoder::new(&mut b.scope("encoder"), cfg.final_channels(), &RayEncoderConfig::default()).unwrap();

    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let image = tape.constant(Tensor::uniform(&[1, 3, 224, 224], 0.0, 1.0, &mut init_rng(1)));
    let extracted = backbone.extract(&mut tape, &p, image).unwrap();
    assert_eq!(tape.shape(extracted), &[1, 64, 28, 28]);
    let pyramid = backbone.forward(&mut tape, &p, image).unwrap();
    assert_eq!(tape.shape(pyramid.deepest()), &[1, 4096, 14, 14]);
    let encoded = encoder.encode(&mut tape, &p, &pyramid).unwrap();
    assert_eq!(tape.shape(encoded.tokens), &[1, 196, 256]);
    assert_eq!(encoded.maps.len(), 3);
    eprintln!("full-size forward took {:.1}s", start.elapsed().as_secs_f64());
}

#[test]
fn full_size_budget_grows_with_rays() {
    let counts: Vec<usize> = [0, 3].iter().map(|&r| param_count(&ModelConfig::full(r)).unwrap().total).collect();
    for (total, target) in counts.iter().zip([9.58e6, 10.38e6]) {
        let dev = *total as f64 / target - 1.0;
        assert!(dev.abs() <= 0.30, "{total} vs {target}");
    }
    assert!(counts[1] > counts[0]);
}
