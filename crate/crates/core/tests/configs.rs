//! The shipped configuration files parse.

use dsmcmc::training::{Manifest, TrainConfig};

fn read(name: &str) -> String {
    std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/").to_owned() + name).unwrap()
}

#[test]
fn default_config_equals_built_in_defaults() {
    assert_eq!(TrainConfig::parse(&read("default.conf")).unwrap(), TrainConfig::default());
}

#[test]
fn example_manifests_build() {
    let sbn = Manifest::parse(&read("sbn200.manifest")).unwrap();
    assert_eq!((sbn.data_dim(), sbn.image_shape), (784, Some((28, 28))));
    let nade = Manifest::parse(&read("nade200.manifest")).unwrap();
    assert_eq!(nade.build().unwrap().0.hidden_dims(), vec![200]);
}
