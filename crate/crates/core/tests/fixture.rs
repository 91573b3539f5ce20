use cryptogen_core::model::{Model, ModelConfig};

const DIR: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/toy");

#[test]
fn bundled_toy_model_loads_and_matches_its_seed() {
    let model = Model::load(DIR).unwrap();
    assert_eq!(model.config, ModelConfig::toy());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(format!("{DIR}/manifest.json")).unwrap()).unwrap();
    let seed = manifest["seed"].as_u64().unwrap();
    assert_eq!(model, Model::generate(ModelConfig::toy(), seed).unwrap());
}
