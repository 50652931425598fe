// Lives in its own test binary: the construction counter is process-wide.

use tps::bench::{generate, write_synth, SynthSpec};
use tps::io::manifest::LoadedManifest;
use tps::{adapt_all, run_dataset, EngineConfig, PrototypeSet};

#[test]
fn loaded_prototypes_are_reused_across_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        classes: 5,
        dim: 12,
        samples_per_class: 4,
        n_views: 8,
        ..SynthSpec::default()
    };
    let manifest = write_synth(&spec, dir.path()).unwrap();
    let other = generate(&SynthSpec { prototype_seed: 0, view_noise_sigma: 0.3, ..spec }).unwrap();

    let lm = LoadedManifest::load(&manifest, true).unwrap();
    let protos = lm.load_prototypes(None).unwrap();
    let before = PrototypeSet::constructions();

    let cfg = EngineConfig::default();
    let first = run_dataset(&protos, lm.batches(), &cfg, 2, |_| Ok(())).unwrap();
    let (_, second) = adapt_all(&protos, &other.batches, &cfg, 2).unwrap();
    assert_eq!(first.samples, 20);
    assert_eq!(second.samples, 20);
    assert_eq!(PrototypeSet::constructions(), before);
}
