#![no_main]

use libfuzzer_sys::fuzz_target;
use slq::backbone::Backbone;
use slq::checkpoint::Container;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Container::decode(data) {
        let _ = Backbone::<f32>::from_container(&c);
        let _ = Backbone::<f64>::from_container(&c);
    }
});
