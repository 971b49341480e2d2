#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;

use attrib_se::fixtures::{self, FixtureConfig, FixtureLayout};

/// pystoi 0.4.1 values for `fixtures::stoi_reference_pairs`, in order.
pub const STOI_GOLDEN: [(&str, f64); 10] = [
    ("white_-5dB", 0.5816278929316804),
    ("babble_0dB", 0.6698093553403115),
    ("white_5dB", 0.6592754953515978),
    ("babble_10dB", 0.7729561306312531),
    ("scaled", 0.9999999999998817),
    ("lowpass", 0.9994456865159413),
    ("delayed", 0.8760947109837578),
    ("white_only", 0.3222722861232055),
    ("other_text", 0.6836342968430514),
    ("hum_0dB", 0.6514101914723817),
];

struct Shared {
    _dir: tempfile::TempDir,
    layout: FixtureLayout,
}

static FIXTURES: OnceLock<Shared> = OnceLock::new();

/// Default fixture corpora, generated once per test binary.
pub fn fixture_layout() -> &'static FixtureLayout {
    &FIXTURES
        .get_or_init(|| {
            let dir = tempfile::tempdir().expect("tempdir");
            let layout = fixtures::generate(&dir.path().join("fixtures"), &FixtureConfig::default())
                .expect("fixture generation");
            Shared { _dir: dir, layout }
        })
        .layout
}

pub fn scratch_dir(name: &str) -> PathBuf {
    fixture_layout().root.parent().expect("fixture parent").join(name)
}
