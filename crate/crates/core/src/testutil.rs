use crate::engine::Kt2Params;
use crate::tree::{load_tree, KcTree};

pub(crate) fn three_node() -> (KcTree, Kt2Params) {
    let tree = load_tree(
        "{\"id\":\"R\",\"name\":\"root\",\"parent\":null}\n\
         {\"id\":\"L1\",\"name\":\"left\",\"parent\":\"R\"}\n\
         {\"id\":\"L2\",\"name\":\"right\",\"parent\":\"R\"}\n",
    )
    .unwrap();
    let mut params = Kt2Params::uniform(&tree, 0.4, 0.2, 0.9, 0.8, 0.7);
    params.gamma.insert("R".into(), 0.5);
    (tree, params)
}

pub(crate) fn one_node(gamma: f64) -> (KcTree, Kt2Params) {
    let tree = load_tree("{\"id\":\"R\",\"name\":\"root\",\"parent\":null}").unwrap();
    let params = Kt2Params::uniform(&tree, gamma, 0.2, 0.9, 0.8, 0.7);
    (tree, params)
}
