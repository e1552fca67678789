use std::path::Path;

use romano_core::harness::ScenarioConfig;

#[test]
fn bundled_scenarios_parse_and_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("conf") {
            continue;
        }
        let text = std::fs::read_to_string(&path).unwrap();
        let cfg = ScenarioConfig::parse(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(format!("{}.conf", cfg.name), path.file_name().unwrap().to_str().unwrap());
        seen += 1;
    }
    assert!(seen >= 4);
}
