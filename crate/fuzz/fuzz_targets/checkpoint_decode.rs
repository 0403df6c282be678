#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((model, meta)) = cmaae_core::checkpoint::decode(data) {
        // Anything accepted must re-encode to a decodable checkpoint.
        let again = cmaae_core::checkpoint::encode(&model, &meta);
        assert!(cmaae_core::checkpoint::decode(&again).is_ok());
    }
});
