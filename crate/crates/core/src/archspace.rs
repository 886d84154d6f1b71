//! Network architectures as computational graphs.
//!
//! A [`CompGraph`] has one node per operation (convolution, batch norm,
//! activation, addition, ...). Nodes that own parameters carry a
//! `param_shape`; [`enumerate_params`] expands those into the flat,
//! deterministic list of [`ParamSpec`]s that a [`crate::WeightSet`] is
//! aligned with.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Input,
    Conv,
    Linear,
    Batchnorm,
    Relu,
    Add,
    Pool,
    GlobalPool,
    Output,
}

impl OpKind {
    pub const ALL: [OpKind; 9] = [
        OpKind::Input,
        OpKind::Conv,
        OpKind::Linear,
        OpKind::Batchnorm,
        OpKind::Relu,
        OpKind::Add,
        OpKind::Pool,
        OpKind::GlobalPool,
        OpKind::Output,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Conv => "conv",
            OpKind::Linear => "linear",
            OpKind::Batchnorm => "batchnorm",
            OpKind::Relu => "relu",
            OpKind::Add => "add",
            OpKind::Pool => "pool",
            OpKind::GlobalPool => "global_pool",
            OpKind::Output => "output",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn has_params(self) -> bool {
        matches!(self, OpKind::Conv | OpKind::Linear | OpKind::Batchnorm)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeSpec {
    pub id: usize,
    pub op: OpKind,
    pub param_shape: Option<Vec<usize>>,
    pub attrs: BTreeMap<String, i64>,
}

impl NodeSpec {
    pub fn attr(&self, key: &str) -> Option<i64> {
        self.attrs.get(key).copied()
    }

    /// Kernel size of a convolution node.
    pub fn kernel(&self) -> Option<usize> {
        match (self.op, &self.param_shape) {
            (OpKind::Conv, Some(s)) if s.len() == 4 => Some(s[2]),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    ConvKernel,
    BnScale,
    BnShift,
    Bias,
    LinearWeight,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamSpec {
    pub node_id: usize,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Inputs feeding one output unit: `in·k·k` for kernels, `in` for
    /// linear weights, 1 otherwise.
    pub fn fan_in(&self) -> usize {
        match self.kind {
            ParamKind::ConvKernel | ParamKind::LinearWeight => self.shape[1..].iter().product(),
            _ => 1,
        }
    }

    pub fn fan_out(&self) -> usize {
        match self.kind {
            ParamKind::ConvKernel => self.shape[0] * self.shape[2..].iter().product::<usize>(),
            ParamKind::LinearWeight => self.shape[0],
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompGraph {
    pub name: String,
    pub nodes: Vec<NodeSpec>,
    pub edges: Vec<(usize, usize)>,
}

impl CompGraph {
    /// Checks every structural invariant: dense ids, a single input and
    /// output, acyclicity, topological node order, full reachability and
    /// per-kind parameter shapes.
    pub fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        if n == 0 {
            return Err(Error::Graph("graph has no nodes".into()));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id != i {
                return Err(Error::Graph(format!(
                    "node at position {i} has id {}; ids must be dense and ordered",
                    node.id
                )));
            }
            match (node.op.has_params(), &node.param_shape) {
                (true, None) => {
                    return Err(Error::Graph(format!("node {i} ({}) needs a shape", node.op.name())))
                }
                (false, Some(_)) => {
                    return Err(Error::Graph(format!(
                        "node {i} ({}) must not have a shape",
                        node.op.name()
                    )))
                }
                (true, Some(s)) => {
                    let want = match node.op {
                        OpKind::Conv => 4,
                        OpKind::Linear => 2,
                        _ => 1,
                    };
                    if s.len() != want || s.contains(&0) {
                        return Err(Error::Graph(format!("node {i} has invalid shape {s:?}")));
                    }
                    if node.op == OpKind::Conv && (s[2] != s[3] || !matches!(s[2], 1 | 3)) {
                        return Err(Error::Graph(format!(
                            "node {i}: conv kernel must be 1x1 or 3x3, got {}x{}",
                            s[2], s[3]
                        )));
                    }
                }
                (false, None) => {}
            }
        }
        for &(u, v) in &self.edges {
            if u >= n || v >= n {
                return Err(Error::Graph(format!("edge ({u}, {v}) references a missing node")));
            }
        }
        if !self.is_acyclic() {
            return Err(Error::Cyclic);
        }
        for &(u, v) in &self.edges {
            if u >= v {
                return Err(Error::Graph(format!(
                    "node order is not topological: edge ({u}, {v})"
                )));
            }
        }
        let inputs: Vec<usize> = self.ids_of(OpKind::Input);
        let outputs: Vec<usize> = self.ids_of(OpKind::Output);
        if inputs.len() != 1 || outputs.len() != 1 {
            return Err(Error::Graph(format!(
                "expected exactly one input and one output node, found {} and {}",
                inputs.len(),
                outputs.len()
            )));
        }
        let fwd = self.reachable(inputs[0], false);
        let bwd = self.reachable(outputs[0], true);
        if let Some(i) = (0..n).find(|&i| !fwd[i] || !bwd[i]) {
            return Err(Error::Graph(format!(
                "node {i} is not on a path from input to output"
            )));
        }
        Ok(())
    }

    fn ids_of(&self, op: OpKind) -> Vec<usize> {
        self.nodes.iter().filter(|n| n.op == op).map(|n| n.id).collect()
    }

    fn is_acyclic(&self) -> bool {
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        let mut out = vec![Vec::new(); n];
        for &(u, v) in &self.edges {
            indeg[v] += 1;
            out[u].push(v);
        }
        let mut queue: VecDeque<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut seen = 0;
        while let Some(u) = queue.pop_front() {
            seen += 1;
            for &v in &out[u] {
                indeg[v] -= 1;
                if indeg[v] == 0 {
                    queue.push_back(v);
                }
            }
        }
        seen == n
    }

    fn reachable(&self, start: usize, reverse: bool) -> Vec<bool> {
        let n = self.nodes.len();
        let mut adj = vec![Vec::new(); n];
        for &(u, v) in &self.edges {
            if reverse {
                adj[v].push(u);
            } else {
                adj[u].push(v);
            }
        }
        let mut seen = vec![false; n];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen
    }

    /// Predecessors of each node, in edge order.
    pub fn in_neighbours(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for &(u, v) in &self.edges {
            adj[v].push(u);
        }
        adj
    }

    pub fn out_neighbours(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for &(u, v) in &self.edges {
            adj[u].push(v);
        }
        adj
    }

    pub fn input_channels(&self) -> usize {
        self.nodes
            .iter()
            .find(|n| n.op == OpKind::Input)
            .and_then(|n| n.attr("channels"))
            .unwrap_or(3) as usize
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.nodes
            .iter()
            .rev()
            .find(|n| n.op == OpKind::Linear)
            .and_then(|n| n.param_shape.as_ref())
            .map(|s| s[0])
    }

    /// Node ids of the 3×3 convolutions, in topological order.
    pub fn conv3x3_layers(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| n.kernel() == Some(3))
            .map(|n| n.id)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.nodes
            .iter()
            .filter_map(|n| {
                let s = n.param_shape.as_ref()?;
                let p: usize = s.iter().product();
                Some(match n.op {
                    OpKind::Batchnorm => 2 * p,
                    OpKind::Linear => p + s[0],
                    _ => p,
                })
            })
            .sum()
    }
}

struct Builder {
    nodes: Vec<NodeSpec>,
    edges: Vec<(usize, usize)>,
}

impl Builder {
    fn node(&mut self, op: OpKind, shape: Option<Vec<usize>>, attrs: &[(&str, i64)], from: &[usize]) -> usize {
        let id = self.nodes.len();
        self.nodes.push(NodeSpec {
            id,
            op,
            param_shape: shape,
            attrs: attrs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        });
        self.edges.extend(from.iter().map(|&u| (u, id)));
        id
    }

    fn conv(&mut self, from: usize, out: usize, inp: usize, k: usize, stride: usize) -> usize {
        let pad = (k / 2) as i64;
        self.node(
            OpKind::Conv,
            Some(vec![out, inp, k, k]),
            &[("kernel", k as i64), ("padding", pad), ("stride", stride as i64)],
            &[from],
        )
    }

    fn bn(&mut self, from: usize, ch: usize) -> usize {
        self.node(OpKind::Batchnorm, Some(vec![ch]), &[], &[from])
    }

    fn relu(&mut self, from: usize) -> usize {
        self.node(OpKind::Relu, None, &[], &[from])
    }
}

/// The CIFAR-style residual network of depth `6n + 2`: a 3×3 stem, three
/// stages of `n` basic blocks with `16·width`, `32·width`, `64·width`
/// channels, stride-2 transitions with 1×1 projection shortcuts, global
/// average pooling and a linear head.
pub fn build_resnet_graph(depth: usize, width: usize, num_classes: usize) -> Result<CompGraph> {
    if depth < 8 || (depth - 2) % 6 != 0 {
        return Err(Error::Architecture(format!(
            "depth {depth} is not of the form 6n+2 with n >= 1"
        )));
    }
    if width < 1 {
        return Err(Error::Architecture("width must be at least 1".into()));
    }
    if num_classes < 2 {
        return Err(Error::Architecture("num_classes must be at least 2".into()));
    }
    let blocks = (depth - 2) / 6;
    let mut b = Builder {
        nodes: Vec::new(),
        edges: Vec::new(),
    };
    let input = b.node(OpKind::Input, None, &[("channels", 3)], &[]);
    let base = 16 * width;
    let stem = b.conv(input, base, 3, 3, 1);
    let stem = b.bn(stem, base);
    let mut x = b.relu(stem);
    let mut in_ch = base;
    for stage in 0..3 {
        let ch = base << stage;
        for block in 0..blocks {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let c1 = b.conv(x, ch, in_ch, 3, stride);
            let n1 = b.bn(c1, ch);
            let r1 = b.relu(n1);
            let c2 = b.conv(r1, ch, ch, 3, 1);
            let n2 = b.bn(c2, ch);
            let shortcut = if stride != 1 || in_ch != ch {
                let p = b.conv(x, ch, in_ch, 1, stride);
                b.bn(p, ch)
            } else {
                x
            };
            let sum = b.node(OpKind::Add, None, &[], &[n2, shortcut]);
            x = b.relu(sum);
            in_ch = ch;
        }
    }
    let pool = b.node(OpKind::GlobalPool, None, &[], &[x]);
    let head = b.node(OpKind::Linear, Some(vec![num_classes, in_ch]), &[], &[pool]);
    b.node(OpKind::Output, None, &[], &[head]);
    let name = if width == 1 {
        format!("resnet{depth}")
    } else {
        format!("resnet{depth}x{width}")
    };
    Ok(CompGraph {
        name,
        nodes: b.nodes,
        edges: b.edges,
    })
}

/// Parses names like `resnet20` or `resnet20x2`.
pub fn resnet_from_name(name: &str, num_classes: usize) -> Result<CompGraph> {
    let rest = name
        .strip_prefix("resnet")
        .ok_or_else(|| Error::Architecture(format!("unknown architecture `{name}`")))?;
    let (d, w) = match rest.split_once('x') {
        Some((d, w)) => (d, w),
        None => (rest, "1"),
    };
    let depth = d
        .parse()
        .map_err(|_| Error::Architecture(format!("bad depth in `{name}`")))?;
    let width = w
        .parse()
        .map_err(|_| Error::Architecture(format!("bad width in `{name}`")))?;
    build_resnet_graph(depth, width, num_classes)
}

/// Every parameter tensor of `g`: nodes in topological order, and within a
/// node ordered conv_kernel < bn_scale < bn_shift < bias < linear_weight.
pub fn enumerate_params(g: &CompGraph) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    for node in &g.nodes {
        let Some(shape) = &node.param_shape else { continue };
        let mut push = |kind, shape: Vec<usize>| {
            out.push(ParamSpec {
                node_id: node.id,
                shape,
                kind,
            })
        };
        match node.op {
            OpKind::Conv => push(ParamKind::ConvKernel, shape.clone()),
            OpKind::Batchnorm => {
                push(ParamKind::BnScale, shape.clone());
                push(ParamKind::BnShift, shape.clone());
            }
            OpKind::Linear => {
                push(ParamKind::Bias, vec![shape[0]]);
                push(ParamKind::LinearWeight, shape.clone());
            }
            _ => {}
        }
    }
    out
}

pub fn serialize_graph(g: &CompGraph) -> Vec<u8> {
    let nodes: Vec<Value> = g
        .nodes
        .iter()
        .map(|n| {
            let mut m = Map::new();
            m.insert("id".into(), json!(n.id));
            m.insert("op".into(), json!(n.op.name()));
            if let Some(s) = &n.param_shape {
                m.insert("shape".into(), json!(s));
            }
            if !n.attrs.is_empty() {
                m.insert("attrs".into(), json!(n.attrs));
            }
            Value::Object(m)
        })
        .collect();
    let edges: Vec<[usize; 2]> = g.edges.iter().map(|&(u, v)| [u, v]).collect();
    let doc = json!({ "name": g.name, "nodes": nodes, "edges": edges });
    serde_json::to_vec_pretty(&doc).expect("graph json")
}

fn perr(field: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        field: field.to_string(),
        message: message.into(),
    }
}

fn as_usize(v: &Value, field: &str) -> Result<usize> {
    v.as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| perr(field, "expected a non-negative integer"))
}

/// Parses the graph JSON document and validates it.
pub fn deserialize_graph(bytes: &[u8]) -> Result<CompGraph> {
    let doc: Value = serde_json::from_slice(bytes).map_err(|e| perr("<document>", e.to_string()))?;
    let obj = doc.as_object().ok_or_else(|| perr("<document>", "expected an object"))?;
    let name = obj
        .get("name")
        .ok_or_else(|| perr("name", "missing field"))?
        .as_str()
        .ok_or_else(|| perr("name", "expected a string"))?
        .to_string();
    let raw_nodes = obj
        .get("nodes")
        .ok_or_else(|| perr("nodes", "missing field"))?
        .as_array()
        .ok_or_else(|| perr("nodes", "expected an array"))?;
    let raw_edges = obj
        .get("edges")
        .ok_or_else(|| perr("edges", "missing field"))?
        .as_array()
        .ok_or_else(|| perr("edges", "expected an array"))?;
    let mut nodes = Vec::with_capacity(raw_nodes.len());
    for (i, rn) in raw_nodes.iter().enumerate() {
        let f = |k: &str| format!("nodes[{i}].{k}");
        let o = rn.as_object().ok_or_else(|| perr(&format!("nodes[{i}]"), "expected an object"))?;
        let id = as_usize(o.get("id").ok_or_else(|| perr(&f("id"), "missing field"))?, &f("id"))?;
        let op_name = o
            .get("op")
            .ok_or_else(|| perr(&f("op"), "missing field"))?
            .as_str()
            .ok_or_else(|| perr(&f("op"), "expected a string"))?;
        let op = OpKind::parse(op_name).ok_or_else(|| perr(&f("op"), format!("unknown op `{op_name}`")))?;
        let param_shape = match o.get("shape") {
            None | Some(Value::Null) => None,
            Some(Value::Array(a)) => Some(
                a.iter()
                    .map(|v| as_usize(v, &f("shape")))
                    .collect::<Result<Vec<_>>>()?,
            ),
            Some(_) => return Err(perr(&f("shape"), "expected an array")),
        };
        let attrs = match o.get("attrs") {
            None | Some(Value::Null) => BTreeMap::new(),
            Some(Value::Object(m)) => m
                .iter()
                .map(|(k, v)| {
                    v.as_i64()
                        .map(|x| (k.clone(), x))
                        .ok_or_else(|| perr(&f(&format!("attrs.{k}")), "expected an integer"))
                })
                .collect::<Result<_>>()?,
            Some(_) => return Err(perr(&f("attrs"), "expected an object")),
        };
        nodes.push(NodeSpec {
            id,
            op,
            param_shape,
            attrs,
        });
    }
    let mut edges = Vec::with_capacity(raw_edges.len());
    for (i, e) in raw_edges.iter().enumerate() {
        let field = format!("edges[{i}]");
        let pair = e
            .as_array()
            .filter(|a| a.len() == 2)
            .ok_or_else(|| perr(&field, "expected [src, dst]"))?;
        edges.push((as_usize(&pair[0], &field)?, as_usize(&pair[1], &field)?));
    }
    let g = CompGraph { name, nodes, edges };
    g.validate()?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn count(g: &CompGraph, f: impl Fn(&NodeSpec) -> bool) -> usize {
        g.nodes.iter().filter(|n| f(n)).count()
    }

    #[test]
    fn resnet20_has_21_convs_and_one_head() {
        let g = build_resnet_graph(20, 1, 10).unwrap();
        g.validate().unwrap();
        assert_eq!(count(&g, |n| n.op == OpKind::Conv), 21);
        assert_eq!(count(&g, |n| n.kernel() == Some(3)), 19);
        assert_eq!(count(&g, |n| n.kernel() == Some(1)), 2);
        assert_eq!(count(&g, |n| n.op == OpKind::Linear), 1);
    }

    #[test]
    fn resnet8_is_the_smallest_member() {
        let g = build_resnet_graph(8, 1, 2).unwrap();
        assert_eq!(count(&g, |n| n.kernel() == Some(3)), 7);
        assert!(build_resnet_graph(2, 1, 2).is_err());
        assert!(build_resnet_graph(9, 1, 2).is_err());
        assert!(build_resnet_graph(8, 0, 2).is_err());
        assert!(build_resnet_graph(8, 1, 1).is_err());
    }

    #[test]
    fn class_count_only_changes_the_head() {
        let a = build_resnet_graph(20, 1, 10).unwrap();
        let b = build_resnet_graph(20, 1, 2).unwrap();
        assert_eq!(a.edges, b.edges);
        assert_eq!(a.nodes.len(), b.nodes.len());
        let diff: Vec<_> = a
            .nodes
            .iter()
            .zip(&b.nodes)
            .filter(|(x, y)| x != y)
            .map(|(x, _)| x.op)
            .collect();
        assert_eq!(diff, vec![OpKind::Linear]);
        assert_eq!(
            b.nodes.iter().find(|n| n.op == OpKind::Linear).unwrap().param_shape,
            Some(vec![2, 64])
        );
    }

    #[test]
    fn first_param_is_the_stem_kernel() {
        let g = build_resnet_graph(8, 1, 2).unwrap();
        let p = enumerate_params(&g);
        assert_eq!(p[0].shape, vec![16, 3, 3, 3]);
        assert_eq!(p[0].kind, ParamKind::ConvKernel);
        assert_eq!(p, enumerate_params(&g));
        let last: Vec<_> = p.iter().rev().take(2).map(|s| s.kind).collect();
        assert_eq!(last, vec![ParamKind::LinearWeight, ParamKind::Bias]);
    }

    #[test]
    fn parameterless_graph_enumerates_nothing() {
        let g = CompGraph {
            name: "id".into(),
            nodes: vec![
                NodeSpec { id: 0, op: OpKind::Input, param_shape: None, attrs: BTreeMap::new() },
                NodeSpec { id: 1, op: OpKind::Relu, param_shape: None, attrs: BTreeMap::new() },
                NodeSpec { id: 2, op: OpKind::Output, param_shape: None, attrs: BTreeMap::new() },
            ],
            edges: vec![(0, 1), (1, 2)],
        };
        g.validate().unwrap();
        assert!(enumerate_params(&g).is_empty());
    }

    #[test]
    fn json_round_trip_and_errors() {
        let g = build_resnet_graph(20, 1, 10).unwrap();
        let bytes = serialize_graph(&g);
        assert_eq!(deserialize_graph(&bytes).unwrap(), g);

        let cyclic = br#"{"name":"c","nodes":[{"id":0,"op":"input"},{"id":1,"op":"relu"},{"id":2,"op":"output"}],"edges":[[0,1],[1,2],[2,1]]}"#;
        let err = deserialize_graph(cyclic).unwrap_err();
        assert_eq!(err.to_string(), "graph not acyclic");

        let missing = br#"{"name":"c","nodes":[]}"#;
        match deserialize_graph(missing).unwrap_err() {
            Error::Parse { field, .. } => assert_eq!(field, "edges"),
            e => panic!("unexpected {e}"),
        }
        let bad_op = br#"{"name":"c","nodes":[{"id":0,"op":"lstm"}],"edges":[]}"#;
        match deserialize_graph(bad_op).unwrap_err() {
            Error::Parse { field, .. } => assert_eq!(field, "nodes[0].op"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn rejects_shapeless_conv_and_extra_outputs() {
        let mut g = build_resnet_graph(8, 1, 2).unwrap();
        g.nodes[1].param_shape = None;
        assert!(g.validate().is_err());
        let mut g = build_resnet_graph(8, 1, 2).unwrap();
        g.nodes[3].op = OpKind::Output;
        assert!(g.validate().is_err());
    }

    proptest! {
        #[test]
        fn built_graphs_are_valid_and_counts_agree(n in 1usize..6, width in 1usize..3, classes in 2usize..12) {
            let g = build_resnet_graph(6 * n + 2, width, classes).unwrap();
            prop_assert!(g.validate().is_ok());
            for &(u, v) in &g.edges {
                prop_assert!(u < v);
            }
            let specs = enumerate_params(&g);
            let via_specs: usize = specs.iter().map(|s| s.numel()).sum();
            // independent recount straight from the construction rule
            let (b, w) = (n, 16 * width);
            let mut expect = w * 3 * 9 + 2 * w;
            let mut cin = w;
            for stage in 0..3 {
                let ch = w << stage;
                for block in 0..b {
                    expect += ch * cin * 9 + 2 * ch + ch * ch * 9 + 2 * ch;
                    if stage > 0 && block == 0 {
                        expect += ch * cin + 2 * ch;
                    }
                    cin = ch;
                }
            }
            expect += classes * cin + classes;
            prop_assert_eq!(via_specs, expect);
            prop_assert_eq!(g.param_count(), expect);
            prop_assert_eq!(g.clone(), build_resnet_graph(6 * n + 2, width, classes).unwrap());
        }
    }
}
