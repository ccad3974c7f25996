use super::{Entity, PairTagList, SnippetTriplet, TaggedList, Term, Triplet, TripletList};

/// Deterministic single-space rendering in the reply grammar.
pub trait Canonical {
    fn canonical(&self) -> String;
}

impl Canonical for Triplet {
    fn canonical(&self) -> String {
        let mut out = String::new();
        write_triplet(self, &mut out);
        out
    }
}

impl Canonical for Term {
    fn canonical(&self) -> String {
        match self {
            Term::Entity(name) => name.clone(),
            Term::None => "<none>".to_string(),
            Term::Nested(t) => t.canonical(),
        }
    }
}

impl Canonical for Entity {
    fn canonical(&self) -> String {
        format!("{} <{}>", self.name, self.etype)
    }
}

impl Canonical for TripletList {
    fn canonical(&self) -> String {
        render_triplet_list(&self.items, self.separator.as_str())
    }
}

impl Canonical for TaggedList {
    fn canonical(&self) -> String {
        let items: Vec<String> = self
            .items
            .iter()
            .map(|i| {
                format!(
                    "{} <{}> `{}`",
                    i.triplet.canonical(),
                    i.tag.kind.tag(),
                    i.tag.time_ref.as_deref().unwrap_or("none")
                )
            })
            .collect();
        format!("[{}]", items.join(self.separator.as_str()))
    }
}

impl Canonical for PairTagList {
    fn canonical(&self) -> String {
        let items: Vec<String> = self
            .items
            .iter()
            .map(|p| format!("({}, {}) -> <{}>", p.first.canonical(), p.second.canonical(), p.tag))
            .collect();
        format!("[{}]", items.join(self.separator.as_str()))
    }
}

fn write_triplet(t: &Triplet, out: &mut String) {
    out.push('(');
    out.push_str(&t.subject);
    out.push_str(", ");
    out.push_str(&t.relation);
    out.push_str(", ");
    match &t.object {
        Term::Entity(name) => out.push_str(name),
        Term::None => out.push_str("<none>"),
        Term::Nested(inner) => write_triplet(inner, out),
    }
    out.push(')');
}

/// `name <tag>; name <tag>` as in entity extraction replies.
pub fn render_entity_list(entities: &[Entity]) -> String {
    entities.iter().map(Canonical::canonical).collect::<Vec<_>>().join("; ")
}

pub fn render_triplet_list(items: &[SnippetTriplet], separator: &str) -> String {
    let items: Vec<String> = items
        .iter()
        .map(|i| match &i.snippet {
            Some(s) => format!("{} `{}`", i.triplet.canonical(), s),
            None => i.triplet.canonical(),
        })
        .collect();
    format!("[{}]", items.join(separator))
}

/// Bracketed list of bare triplets, `[(a, b, c), (d, e, f)]`.
pub fn render_triplets<'a>(triplets: impl IntoIterator<Item = &'a Triplet>, separator: &str) -> String {
    let items: Vec<String> = triplets.into_iter().map(Canonical::canonical).collect();
    format!("[{}]", items.join(separator))
}

pub fn render_tagged_list(list: &TaggedList) -> String {
    list.canonical()
}

pub fn render_pair_tags(list: &PairTagList) -> String {
    list.canonical()
}
