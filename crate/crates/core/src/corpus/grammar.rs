//! Fixed event bank and caption grammar of the synthetic world.
//!
//! Templates use `{a|b}` for a synonym slot. Paired templates realise the
//! captions that come with audio; withheld templates are reserved for the
//! text-only paraphrase pool and introduce words the paired pool never uses.

pub(crate) struct EventSpec {
    pub name: &'static str,
    pub paired: [&'static str; 2],
    pub withheld: [&'static str; 2],
}

pub(crate) const EVENT_BANK: &[EventSpec] = &[
    EventSpec {
        name: "dog",
        paired: ["a dog barks {loudly|nearby}", "a dog is barking"],
        withheld: ["a puppy yelps", "a hound howls {loudly|nearby}"],
    },
    EventSpec {
        name: "rain",
        paired: ["rain falls on a roof", "heavy rain is pouring"],
        withheld: ["raindrops patter on a window", "a storm drizzles steadily"],
    },
    EventSpec {
        name: "car",
        paired: ["a car drives {past|by}", "a vehicle passes on a road"],
        withheld: ["traffic rushes along a highway", "an automobile zooms past"],
    },
    EventSpec {
        name: "birds",
        paired: ["birds are chirping", "a bird sings {nearby|loudly}"],
        withheld: ["songbirds tweet cheerfully", "a sparrow warbles"],
    },
    EventSpec {
        name: "speech",
        paired: ["a man is speaking", "a man talks {quietly|loudly}"],
        withheld: ["a gentleman speaks calmly", "a male voice narrates"],
    },
    EventSpec {
        name: "music",
        paired: ["music is playing", "a piano plays a melody"],
        withheld: ["an orchestra performs softly", "a guitar strums a tune"],
    },
    EventSpec {
        name: "stream",
        paired: ["water flows in a stream", "water is trickling"],
        withheld: ["a brook babbles gently", "a creek gurgles"],
    },
    EventSpec {
        name: "wind",
        paired: ["wind blows {strongly|softly}", "strong wind is gusting"],
        withheld: ["a breeze howls outside", "a gale whistles"],
    },
    EventSpec {
        name: "door",
        paired: ["a door slams {shut|loudly}", "a door creaks open"],
        withheld: ["someone knocks on wood", "a gate squeaks"],
    },
    EventSpec {
        name: "engine",
        paired: ["an engine is idling", "a motor is running"],
        withheld: ["machinery hums steadily", "a generator drones"],
    },
    EventSpec {
        name: "baby",
        paired: ["a baby cries", "an infant is crying {loudly|softly}"],
        withheld: ["a toddler wails", "a newborn whimpers"],
    },
    EventSpec {
        name: "bell",
        paired: ["a bell rings", "church bells are ringing"],
        withheld: ["chimes jingle faintly", "a gong resonates"],
    },
];

pub(crate) const CONNECTORS: [&str; 3] = ["while", "then", "and"];

/// Registered caption styles: `(name, prefix, suffix)` wrapped around the caption.
pub(crate) const STYLES: &[(&str, &str, &str)] = &[
    ("news", "breaking news: ", ", more at eleven"),
    ("humor", "", ", and honestly nobody asked for this"),
    ("poem", "hark, ", ", so the day goes on"),
];

/// Expands every `{a|b}` slot, returning all realisations.
pub(crate) fn expansions(template: &str) -> Vec<String> {
    let mut out = vec![String::new()];
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let close = open + rest[open..].find('}').expect("unclosed slot");
        let head = &rest[..open];
        let alts: Vec<&str> = rest[open + 1..close].split('|').collect();
        out = out.iter().flat_map(|p| alts.iter().map(move |a| format!("{p}{head}{a}"))).collect();
        rest = &rest[close + 1..];
    }
    out.into_iter().map(|p| format!("{p}{rest}")).collect()
}

/// Realises `template`, picking slot alternatives with `pick(n) in 0..n`.
pub(crate) fn realize(template: &str, mut pick: impl FnMut(usize) -> usize) -> String {
    let mut out = String::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let close = open + rest[open..].find('}').expect("unclosed slot");
        out.push_str(&rest[..open]);
        let alts: Vec<&str> = rest[open + 1..close].split('|').collect();
        out.push_str(alts[pick(alts.len())]);
        rest = &rest[close + 1..];
    }
    out.push_str(rest);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expansion_covers_slots() {
        assert_eq!(expansions("a dog barks {loudly|nearby}"), ["a dog barks loudly", "a dog barks nearby"]);
        assert_eq!(expansions("no slots"), ["no slots"]);
        assert_eq!(realize("x {a|b} y {c|d}", |_| 1), "x b y d");
    }
}
