//! Caption templates. `{c}` is the character phrase and `{b}` the
//! background phrase, which disappears when the background is not mentioned.

pub const TEMPLATES_PER_ACTION: usize = 5;

pub const TEMPLATES: [[&str; TEMPLATES_PER_ACTION]; 8] = [
    ["{c} walk {b}", "{c} go for a walk {b}", "{b} {c} walk slowly", "{b} {c} stroll around", "{c} take a little stroll {b}"],
    ["{c} run {b}", "{c} run very fast {b}", "{b} {c} start running", "{b} {c} dash ahead", "{c} sprint together {b}"],
    ["{c} jump {b}", "{c} jump up high {b}", "{b} {c} are jumping", "{b} {c} hop around", "{c} leap into the air {b}"],
    ["{c} eat {b}", "{c} eat some food {b}", "{b} {c} are eating", "{b} {c} have a snack", "{c} enjoy a tasty meal {b}"],
    ["{c} sleep {b}", "{c} fall asleep {b}", "{b} {c} are sleeping", "{b} {c} take a nap", "{c} doze off quietly {b}"],
    ["{c} sing {b}", "{c} sing a song {b}", "{b} {c} are singing", "{b} {c} hum a tune", "{c} perform a melody {b}"],
    ["{c} dance {b}", "{c} dance happily {b}", "{b} {c} are dancing", "{b} {c} twirl around", "{c} move to the music {b}"],
    ["{c} read {b}", "{c} read a book {b}", "{b} {c} are reading", "{b} {c} study a story", "{c} look at the pages {b}"],
];

pub const BACKGROUND_PHRASES: [&str; 4] = ["in the snow", "in the forest", "in the room", "at the beach"];

pub const FRIENDS: &str = "friends";

/// "pororo", "pororo and crong", "pororo crong and eddy".
pub fn character_phrase(names: &[&str]) -> String {
    match names {
        [] => String::new(),
        [one] => one.to_string(),
        [init @ .., last] => format!("{} and {last}", init.join(" ")),
    }
}

pub fn fill(template: &str, characters: &str, background: Option<&str>) -> String {
    let s = template.replace("{c}", characters).replace("{b}", background.unwrap_or(""));
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
