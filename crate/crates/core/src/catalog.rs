//! The static recommendation universe: users, items, attribute taxonomy and
//! interactions, plus the tripartite global graph built from them.
//!
//! Ids are dense per entity class. The shared embedding index space lays the
//! classes out as `[users | items | values]`, see [`EntityIndex`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub type UserId = usize;
pub type ItemId = usize;
pub type ValueId = usize;
pub type TypeId = usize;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: unknown {kind} id {id}")]
    UnknownId { line: usize, kind: &'static str, id: usize },
    #[error("line {line}: value {value} has unknown type {type_id}")]
    UnknownType { line: usize, value: usize, type_id: usize },
    #[error("{kind} ids must be dense 0..{count}, missing {missing}")]
    NonDense { kind: &'static str, count: usize, missing: usize },
    #[error("invalid catalog: {0}")]
    Invalid(String),
    #[error("infeasible synthetic spec: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Users, items, attribute types/values and the interactions between them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Catalog {
    type_names: Vec<String>,
    value_names: Vec<String>,
    value_type: Vec<TypeId>,
    item_values: Vec<Vec<ValueId>>,
    interactions: Vec<Vec<ItemId>>,
    // derived
    item_types: Vec<Vec<TypeId>>,
    items_with_value: Vec<Vec<ItemId>>,
    single_valued: Vec<bool>,
}

impl Catalog {
    /// Builds and validates a catalog. Value and item lists are sorted and deduplicated.
    pub fn new(
        type_names: Vec<String>,
        value_names: Vec<String>,
        value_type: Vec<TypeId>,
        item_values: Vec<Vec<ValueId>>,
        interactions: Vec<Vec<ItemId>>,
    ) -> Result<Self, CatalogError> {
        if value_names.len() != value_type.len() {
            return Err(CatalogError::Invalid("value names and value types differ in length".into()));
        }
        let n_types = type_names.len();
        let n_values = value_names.len();
        let n_items = item_values.len();
        for (p, &y) in value_type.iter().enumerate() {
            if y >= n_types {
                return Err(CatalogError::Invalid(format!("value {p} has unknown type {y}")));
            }
        }
        let norm = |mut v: Vec<usize>| {
            v.sort_unstable();
            v.dedup();
            v
        };
        let item_values: Vec<Vec<ValueId>> = item_values.into_iter().map(norm).collect();
        let interactions: Vec<Vec<ItemId>> = interactions.into_iter().map(norm).collect();
        for (v, vals) in item_values.iter().enumerate() {
            if let Some(&p) = vals.iter().find(|&&p| p >= n_values) {
                return Err(CatalogError::Invalid(format!("item {v} references unknown value {p}")));
            }
        }
        for (u, items) in interactions.iter().enumerate() {
            if let Some(&v) = items.iter().find(|&&v| v >= n_items) {
                return Err(CatalogError::Invalid(format!("user {u} references unknown item {v}")));
            }
        }
        let item_types = item_values
            .iter()
            .map(|vals| {
                let set: BTreeSet<TypeId> = vals.iter().map(|&p| value_type[p]).collect();
                set.into_iter().collect()
            })
            .collect();
        let mut items_with_value = vec![Vec::new(); n_values];
        for (v, vals) in item_values.iter().enumerate() {
            for &p in vals {
                items_with_value[p].push(v);
            }
        }
        let mut single_valued = vec![true; n_types];
        for vals in &item_values {
            let mut seen = vec![false; n_types];
            for &p in vals {
                let y = value_type[p];
                if seen[y] {
                    single_valued[y] = false;
                }
                seen[y] = true;
            }
        }
        Ok(Self { type_names, value_names, value_type, item_values, interactions, item_types, items_with_value, single_valued })
    }

    pub fn n_users(&self) -> usize {
        self.interactions.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_values.len()
    }

    pub fn n_values(&self) -> usize {
        self.value_names.len()
    }

    pub fn n_types(&self) -> usize {
        self.type_names.len()
    }

    pub fn entity_index(&self) -> EntityIndex {
        EntityIndex { n_users: self.n_users(), n_items: self.n_items(), n_values: self.n_values() }
    }

    pub fn type_name(&self, y: TypeId) -> &str {
        &self.type_names[y]
    }

    pub fn value_name(&self, p: ValueId) -> &str {
        &self.value_names[p]
    }

    pub fn value_type(&self, p: ValueId) -> TypeId {
        self.value_type[p]
    }

    /// `P(v)`, sorted.
    pub fn item_values(&self, v: ItemId) -> &[ValueId] {
        &self.item_values[v]
    }

    /// `Y(v)`, sorted.
    pub fn item_types(&self, v: ItemId) -> &[TypeId] {
        &self.item_types[v]
    }

    /// `V(u)`, sorted.
    pub fn user_items(&self, u: UserId) -> &[ItemId] {
        &self.interactions[u]
    }

    /// `V_p`: items carrying value `p`, sorted.
    pub fn items_with_value(&self, p: ValueId) -> &[ItemId] {
        &self.items_with_value[p]
    }

    pub fn item_has_value(&self, v: ItemId, p: ValueId) -> bool {
        self.item_values[v].binary_search(&p).is_ok()
    }

    /// All values of type `y`, ascending.
    pub fn values_of_type(&self, y: TypeId) -> Vec<ValueId> {
        (0..self.n_values()).filter(|&p| self.value_type[p] == y).collect()
    }

    /// Whether every item carries at most one value of type `y`.
    pub fn is_single_valued(&self, y: TypeId) -> bool {
        self.single_valued[y]
    }

    pub fn interaction_count(&self) -> usize {
        self.interactions.iter().map(Vec::len).sum()
    }

    /// Values carried by every item in `items`, ascending.
    pub fn shared_values(&self, items: &[ItemId]) -> Vec<ValueId> {
        let Some((&first, rest)) = items.split_first() else { return Vec::new() };
        self.item_values[first].iter().copied().filter(|&p| rest.iter().all(|&v| self.item_has_value(v, p))).collect()
    }

    /// Users with at least one interaction, ascending.
    pub fn active_users(&self) -> Vec<UserId> {
        (0..self.n_users()).filter(|&u| !self.interactions[u].is_empty()).collect()
    }

    /// The same universe with a different interaction table.
    pub fn with_interactions(&self, interactions: Vec<Vec<ItemId>>) -> Result<Self, CatalogError> {
        Catalog::new(
            self.type_names.clone(),
            self.value_names.clone(),
            self.value_type.clone(),
            self.item_values.clone(),
            interactions,
        )
    }

    /// Serializes to the tab-separated line-record format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("; converse catalog\n#types\n");
        for (y, name) in self.type_names.iter().enumerate() {
            let _ = writeln!(out, "{y}\t{name}");
        }
        out.push_str("#values\n");
        for (p, name) in self.value_names.iter().enumerate() {
            let _ = writeln!(out, "{p}\t{}\t{name}", self.value_type[p]);
        }
        out.push_str("#items\n");
        for (v, vals) in self.item_values.iter().enumerate() {
            let _ = writeln!(out, "{v}\t{}", join(vals));
        }
        out.push_str("#interactions\n");
        for (u, items) in self.interactions.iter().enumerate() {
            if !items.is_empty() {
                let _ = writeln!(out, "{u}\t{}", join(items));
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), CatalogError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Short content hash used to tie checkpoints to the catalog they were trained on.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        hex::encode(&digest[..8])
    }
}

fn join(ids: &[usize]) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Row layout of the shared embedding table: `[users | items | values]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityIndex {
    pub n_users: usize,
    pub n_items: usize,
    pub n_values: usize,
}

impl EntityIndex {
    pub fn total(&self) -> usize {
        self.n_users + self.n_items + self.n_values
    }

    #[inline]
    pub fn user(&self, u: UserId) -> usize {
        u
    }

    #[inline]
    pub fn item(&self, v: ItemId) -> usize {
        self.n_users + v
    }

    #[inline]
    pub fn value(&self, p: ValueId) -> usize {
        self.n_users + self.n_items + p
    }

    pub fn row(&self, e: Entity) -> usize {
        match e {
            Entity::User(u) => self.user(u),
            Entity::Item(v) => self.item(v),
            Entity::Value(p) => self.value(p),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "snake_case")]
pub enum Entity {
    User(UserId),
    Item(ItemId),
    Value(ValueId),
}

/// The tripartite user–item–value graph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlobalGraph {
    pub index: EntityIndex,
    pub user_item_edges: Vec<(UserId, ItemId)>,
    pub value_item_edges: Vec<(ValueId, ItemId)>,
}

impl GlobalGraph {
    pub fn node_count(&self) -> usize {
        self.index.total()
    }

    pub fn items_of_user(&self, u: UserId) -> Vec<ItemId> {
        self.user_item_edges.iter().filter(|e| e.0 == u).map(|e| e.1).collect()
    }

    pub fn values_of_item(&self, v: ItemId) -> Vec<ValueId> {
        self.value_item_edges.iter().filter(|e| e.1 == v).map(|e| e.0).collect()
    }
}

pub fn build_global_graph(catalog: &Catalog) -> GlobalGraph {
    let mut user_item_edges = Vec::with_capacity(catalog.interaction_count());
    for u in 0..catalog.n_users() {
        for &v in catalog.user_items(u) {
            user_item_edges.push((u, v));
        }
    }
    let mut value_item_edges = Vec::new();
    for v in 0..catalog.n_items() {
        for &p in catalog.item_values(v) {
            value_item_edges.push((p, v));
        }
    }
    GlobalGraph { index: catalog.entity_index(), user_item_edges, value_item_edges }
}

#[derive(Clone, Copy)]
enum Section {
    None,
    Types,
    Values,
    Items,
    Interactions,
}

pub fn load_catalog(path: &Path) -> Result<Catalog, CatalogError> {
    let text = std::fs::read_to_string(path)?;
    parse_catalog(&text)
}

/// Parses the line-record catalog format.
pub fn parse_catalog(text: &str) -> Result<Catalog, CatalogError> {
    let mut section = Section::None;
    let mut types: BTreeMap<usize, String> = BTreeMap::new();
    let mut values: BTreeMap<usize, (usize, String, usize)> = BTreeMap::new();
    let mut items: BTreeMap<usize, (Vec<usize>, usize)> = BTreeMap::new();
    let mut inter: BTreeMap<usize, (Vec<usize>, usize)> = BTreeMap::new();

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let l = raw.trim_end_matches('\r');
        if l.trim().is_empty() || l.starts_with(';') {
            continue;
        }
        if let Some(h) = l.strip_prefix('#') {
            section = match h.trim() {
                "types" => Section::Types,
                "values" => Section::Values,
                "items" => Section::Items,
                "interactions" => Section::Interactions,
                other => return Err(CatalogError::Parse { line, msg: format!("unknown section `#{other}`") }),
            };
            continue;
        }
        let fields: Vec<&str> = l.split('\t').collect();
        let parse_id = |s: &str| -> Result<usize, CatalogError> {
            s.trim().parse().map_err(|_| CatalogError::Parse { line, msg: format!("expected an integer id, found `{s}`") })
        };
        let parse_list = |s: &str| -> Result<Vec<usize>, CatalogError> { s.split(',').map(parse_id).collect() };
        let expect = |n: usize| -> Result<(), CatalogError> {
            if fields.len() == n {
                Ok(())
            } else {
                Err(CatalogError::Parse { line, msg: format!("expected {n} tab-separated fields, found {}", fields.len()) })
            }
        };
        let dup = |kind: &str, id: usize| CatalogError::Parse { line, msg: format!("duplicate {kind} id {id}") };
        match section {
            Section::None => return Err(CatalogError::Parse { line, msg: "record before any section header".into() }),
            Section::Types => {
                expect(2)?;
                let id = parse_id(fields[0])?;
                if types.insert(id, fields[1].to_string()).is_some() {
                    return Err(dup("type", id));
                }
            }
            Section::Values => {
                expect(3)?;
                let id = parse_id(fields[0])?;
                let ty = parse_id(fields[1])?;
                if values.insert(id, (ty, fields[2].to_string(), line)).is_some() {
                    return Err(dup("value", id));
                }
            }
            Section::Items => {
                expect(2)?;
                let id = parse_id(fields[0])?;
                if items.insert(id, (parse_list(fields[1])?, line)).is_some() {
                    return Err(dup("item", id));
                }
            }
            Section::Interactions => {
                expect(2)?;
                let id = parse_id(fields[0])?;
                if inter.insert(id, (parse_list(fields[1])?, line)).is_some() {
                    return Err(dup("user", id));
                }
            }
        }
    }

    dense("type", types.keys())?;
    dense("value", values.keys())?;
    dense("item", items.keys())?;
    dense("user", inter.keys())?;
    for (&p, (ty, _, line)) in &values {
        if !types.contains_key(ty) {
            return Err(CatalogError::UnknownType { line: *line, value: p, type_id: *ty });
        }
    }
    for (vals, line) in items.values() {
        if vals.is_empty() {
            return Err(CatalogError::Parse { line: *line, msg: "item without values".into() });
        }
        if let Some(&p) = vals.iter().find(|p| !values.contains_key(p)) {
            return Err(CatalogError::UnknownId { line: *line, kind: "value", id: p });
        }
    }
    for (its, line) in inter.values() {
        if let Some(&v) = its.iter().find(|v| !items.contains_key(v)) {
            return Err(CatalogError::UnknownId { line: *line, kind: "item", id: v });
        }
    }

    Catalog::new(
        types.into_values().collect(),
        values.values().map(|v| v.1.clone()).collect(),
        values.values().map(|v| v.0).collect(),
        items.into_values().map(|v| v.0).collect(),
        inter.into_values().map(|v| v.0).collect(),
    )
}

fn dense<'a>(kind: &'static str, keys: impl Iterator<Item = &'a usize>) -> Result<(), CatalogError> {
    let keys: Vec<usize> = keys.copied().collect();
    for (expected, &k) in keys.iter().enumerate() {
        if k != expected {
            return Err(CatalogError::NonDense { kind, count: keys.len(), missing: expected });
        }
    }
    Ok(())
}

/// Parameters of a desk-scale synthetic catalog.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub n_types: usize,
    pub n_values_per_type: usize,
    pub values_per_item: usize,
    pub interactions_per_user: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// The standard benchmark catalog: 30 users, 100 items, 8 types with 4 values each.
    fn default() -> Self {
        Self { n_users: 30, n_items: 100, n_types: 8, n_values_per_type: 4, values_per_item: 8, interactions_per_user: 10, seed: 1 }
    }
}

/// Deterministic synthetic catalog.
///
/// Items draw `values_per_item` values (one per type while types last). Each
/// user gets a random anchor value plus a hidden taste profile; interactions
/// are sampled from items carrying the anchor, weighted towards the profile,
/// so every user's items share at least the anchor.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Catalog, CatalogError> {
    let SyntheticSpec { n_users, n_items, n_types, n_values_per_type, values_per_item, interactions_per_user, seed } = *spec;
    for (name, v) in [
        ("n_users", n_users),
        ("n_items", n_items),
        ("n_types", n_types),
        ("n_values_per_type", n_values_per_type),
        ("values_per_item", values_per_item),
        ("interactions_per_user", interactions_per_user),
    ] {
        if v == 0 {
            return Err(CatalogError::Infeasible(format!("{name} must be at least 1")));
        }
    }
    let n_values = n_types * n_values_per_type;
    if values_per_item > n_values {
        return Err(CatalogError::Infeasible(format!("values_per_item {values_per_item} exceeds {n_values} available values")));
    }
    if interactions_per_user > n_items {
        return Err(CatalogError::Infeasible(format!("interactions_per_user {interactions_per_user} exceeds {n_items} items")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let type_names: Vec<String> = (0..n_types).map(|y| format!("type{y}")).collect();
    let value_type: Vec<TypeId> = (0..n_values).map(|p| p / n_values_per_type).collect();
    let value_names: Vec<String> = (0..n_values).map(|p| format!("type{}:v{}", p / n_values_per_type, p % n_values_per_type)).collect();

    let mut item_values = Vec::with_capacity(n_items);
    for _ in 0..n_items {
        let mut vals = Vec::with_capacity(values_per_item);
        let mut order: Vec<TypeId> = (0..n_types).collect();
        order.shuffle(&mut rng);
        for &y in order.iter().take(values_per_item) {
            vals.push(y * n_values_per_type + rng.gen_range(0..n_values_per_type));
        }
        while vals.len() < values_per_item {
            let p = rng.gen_range(0..n_values);
            if !vals.contains(&p) {
                vals.push(p);
            }
        }
        vals.sort_unstable();
        item_values.push(vals);
    }
    let mut items_with_value = vec![Vec::new(); n_values];
    for (v, vals) in item_values.iter().enumerate() {
        for &p in vals {
            items_with_value[p].push(v);
        }
    }
    let carried: Vec<ValueId> = (0..n_values).filter(|&p| !items_with_value[p].is_empty()).collect();

    let mut interactions = Vec::with_capacity(n_users);
    for _ in 0..n_users {
        let anchor = carried[rng.gen_range(0..carried.len())];
        let taste: Vec<ValueId> = (0..n_types).map(|y| y * n_values_per_type + rng.gen_range(0..n_values_per_type)).collect();
        let pool = &items_with_value[anchor];
        let mut keyed: Vec<(f64, ItemId)> = pool
            .iter()
            .map(|&v| {
                let affinity = item_values[v].iter().filter(|p| taste.contains(p)).count() as f64;
                // Efraimidis–Spirakis weighted sampling without replacement.
                let u: f64 = rng.gen_range(f64::EPSILON..1.0);
                (u.powf(1.0 / (1.0 + 2.0 * affinity)), v)
            })
            .collect();
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        interactions.push(keyed.into_iter().take(interactions_per_user).map(|(_, v)| v).collect());
    }

    Catalog::new(type_names, value_names, value_type, item_values, interactions)
}

/// Train / validation / test catalogs over a shared universe.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: Catalog,
    pub valid: Catalog,
    pub test: Catalog,
}

/// Splits each user's interaction pairs 7 : 1.5 : 1.5 (rounded).
///
/// Users with fewer than three interactions keep every pair in train; users
/// with three or more get at least one validation and one test pair.
pub fn split_interactions(catalog: &Catalog, seed: u64) -> Split {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = catalog.n_users();
    let (mut train, mut valid, mut test) = (vec![Vec::new(); n], vec![Vec::new(); n], vec![Vec::new(); n]);
    for u in 0..n {
        let mut items = catalog.user_items(u).to_vec();
        let k = items.len();
        if k < 3 {
            train[u] = items;
            continue;
        }
        items.shuffle(&mut rng);
        let n_valid = ((k as f64 * 0.15).round() as usize).max(1);
        let n_test = ((k as f64 * 0.15).round() as usize).max(1);
        test[u] = items[..n_test].to_vec();
        valid[u] = items[n_test..n_test + n_valid].to_vec();
        train[u] = items[n_test + n_valid..].to_vec();
    }
    let mk = |i| catalog.with_interactions(i).expect("split keeps ids valid");
    Split { train: mk(train), valid: mk(valid), test: mk(test) }
}
