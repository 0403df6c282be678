#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = cmaae_toolkit::RunConfig::parse(text) {
            let back = cmaae_toolkit::RunConfig::parse(&cfg.to_toml()).expect("round trip");
            assert_eq!(back, cfg);
        }
    }
});
