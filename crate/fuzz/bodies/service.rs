// Fuzz body for event-log lines. Shared by the cargo-fuzz target and by
// crates/service/tests/fuzz_seeds.rs.

use cfparse_service::store::Event;

pub fn event_line(data: &[u8]) {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(ev) = serde_json::from_str::<Event>(s) {
        let printed = serde_json::to_string(&ev).expect("events serialize");
        assert_eq!(serde_json::from_str::<Event>(&printed).expect("printed event parses"), ev);
    }
}
