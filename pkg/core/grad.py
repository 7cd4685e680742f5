# -*- coding: utf-8 -*-
"""
反向模式自动微分模块
在稠密 float64 数组上构建计算图，支持去噪网络、高斯对数密度和全部损失函数
"""

import math
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from core.errors import ContractError, DomainError, GraphStructureError

DenseArray = np.ndarray
GradientMap = Dict[str, np.ndarray]

LOG_2PI = math.log(2.0 * math.pi)

_LEAF_OPS = ("parameter", "constant")


def dense(value, shape: Optional[Sequence[int]] = None) -> DenseArray:
    """
    把输入转换为 float64 稠密数组并检查有限性

    Args:
        value: 数组、列表或标量
        shape: 可选的目标形状（行优先）

    Returns:
        DenseArray: 新数组
    """
    array = np.array(value, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if array.size != int(np.prod(shape)):
            raise GraphStructureError(f"数据长度 {array.size} 与形状 {shape} 不一致")
        array = array.reshape(shape)
    if not np.all(np.isfinite(array)):
        raise DomainError("数组中存在非有限值")
    return array


class Node:
    """计算图节点"""

    __slots__ = ("id", "op", "inputs", "attrs", "value", "name", "requires_grad")

    def __init__(self, node_id: int, op: str, inputs: List["Node"], attrs: dict,
                 value: DenseArray, name: Optional[str] = None):
        self.id = node_id
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.value = value
        self.name = name
        if op == "parameter":
            self.requires_grad = True
        else:
            self.requires_grad = any(inp.requires_grad for inp in inputs)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(#{self.id}, {self.op}, shape={self.value.shape})"


# ==================== 前向计算 ====================

def _check_same_shape(values, node_id, op):
    if values[0].shape != values[1].shape:
        raise GraphStructureError(
            f"输入形状不一致: {values[0].shape} vs {values[1].shape}", node_id, op)


def _fwd_affine(values, attrs, node_id):
    x, w = values[0], values[1]
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise GraphStructureError(f"仿射变换形状不匹配: {x.shape} @ {w.shape}", node_id, "affine")
    out = x @ w
    if len(values) == 3:
        b = values[2]
        if b.shape != (w.shape[1],):
            raise GraphStructureError(f"偏置形状 {b.shape} 与输出宽度 {w.shape[1]} 不匹配",
                                      node_id, "affine")
        out = out + b
    return out


def _fwd_tanh(values, attrs, node_id):
    return np.tanh(values[0])


def _fwd_add(values, attrs, node_id):
    _check_same_shape(values, node_id, "add")
    return values[0] + values[1]


def _fwd_sub(values, attrs, node_id):
    _check_same_shape(values, node_id, "sub")
    return values[0] - values[1]


def _fwd_mul(values, attrs, node_id):
    _check_same_shape(values, node_id, "mul")
    return values[0] * values[1]


def _fwd_scale(values, attrs, node_id):
    return values[0] * attrs["factor"]


def _fwd_concat(values, attrs, node_id):
    leading = {v.shape[:-1] for v in values}
    if len(leading) != 1 or any(v.ndim == 0 for v in values):
        raise GraphStructureError(f"拼接输入的前导维度不一致: {[v.shape for v in values]}",
                                  node_id, "concat")
    return np.concatenate(values, axis=-1)


def _fwd_sum(values, attrs, node_id):
    if attrs["axis"] is None:
        return np.asarray(np.sum(values[0]))
    return np.sum(values[0], axis=-1)


def _fwd_mean(values, attrs, node_id):
    if attrs["axis"] is None:
        return np.asarray(np.mean(values[0]))
    return np.mean(values[0], axis=-1)


def _fwd_squared_error(values, attrs, node_id):
    _check_same_shape(values, node_id, "squared_error")
    diff = values[0] - values[1]
    return np.asarray(np.sum(diff * diff))


def _fwd_gaussian(values, attrs, node_id):
    _check_same_shape(values, node_id, "gaussian_log_density")
    x, mean = values
    var = attrs["stddev"] ** 2
    diff = x - mean
    if attrs["axis"] is None:
        count = x.size
        return np.asarray(-0.5 * count * (LOG_2PI + math.log(var)) - np.sum(diff * diff) / (2.0 * var))
    if x.ndim == 0:
        raise GraphStructureError("按行求密度需要至少一维输入", node_id, "gaussian_log_density")
    count = x.shape[-1]
    return -0.5 * count * (LOG_2PI + math.log(var)) - np.sum(diff * diff, axis=-1) / (2.0 * var)


def _fwd_clip(values, attrs, node_id):
    return np.clip(values[0], attrs["low"], attrs["high"])


def _fwd_log_sigmoid(values, attrs, node_id):
    return -np.logaddexp(0.0, -values[0])


_FORWARD: Dict[str, Callable] = {
    "affine": _fwd_affine,
    "tanh": _fwd_tanh,
    "add": _fwd_add,
    "sub": _fwd_sub,
    "mul": _fwd_mul,
    "scale": _fwd_scale,
    "concat": _fwd_concat,
    "sum": _fwd_sum,
    "mean": _fwd_mean,
    "squared_error": _fwd_squared_error,
    "gaussian_log_density": _fwd_gaussian,
    "clip": _fwd_clip,
    "log_sigmoid": _fwd_log_sigmoid,
}


# ==================== 反向传播 ====================

def _expand_rows(grad, like):
    """把按行归约的梯度扩展回输入形状"""
    return np.broadcast_to(grad[..., None], like.shape)


def _bwd_affine(values, out, grad, attrs):
    x, w = values[0], values[1]
    grads = [grad @ w.T, x.T @ grad]
    if len(values) == 3:
        grads.append(np.sum(grad, axis=0))
    return grads


def _bwd_tanh(values, out, grad, attrs):
    return [grad * (1.0 - out * out)]


def _bwd_add(values, out, grad, attrs):
    return [grad, grad]


def _bwd_sub(values, out, grad, attrs):
    return [grad, -grad]


def _bwd_mul(values, out, grad, attrs):
    return [grad * values[1], grad * values[0]]


def _bwd_scale(values, out, grad, attrs):
    return [grad * attrs["factor"]]


def _bwd_concat(values, out, grad, attrs):
    bounds = np.cumsum([v.shape[-1] for v in values])[:-1]
    return np.split(grad, bounds, axis=-1)


def _bwd_sum(values, out, grad, attrs):
    x = values[0]
    if attrs["axis"] is None:
        return [np.full(x.shape, float(grad))]
    return [np.array(_expand_rows(grad, x))]


def _bwd_mean(values, out, grad, attrs):
    x = values[0]
    if attrs["axis"] is None:
        return [np.full(x.shape, float(grad) / x.size)]
    return [np.array(_expand_rows(grad, x)) / x.shape[-1]]


def _bwd_squared_error(values, out, grad, attrs):
    diff = 2.0 * (values[0] - values[1]) * float(grad)
    return [diff, -diff]


def _bwd_gaussian(values, out, grad, attrs):
    x, mean = values
    var = attrs["stddev"] ** 2
    if attrs["axis"] is None:
        gx = -(x - mean) / var * float(grad)
    else:
        gx = -(x - mean) / var * grad[..., None]
    return [gx, -gx]


def _bwd_clip(values, out, grad, attrs):
    x = values[0]
    mask = (x >= attrs["low"]) & (x <= attrs["high"])
    return [grad * mask]


def _bwd_log_sigmoid(values, out, grad, attrs):
    # d/dx log σ(x) = σ(-x)
    return [grad * np.exp(-np.logaddexp(0.0, values[0]))]


_BACKWARD: Dict[str, Callable] = {
    "affine": _bwd_affine,
    "tanh": _bwd_tanh,
    "add": _bwd_add,
    "sub": _bwd_sub,
    "mul": _bwd_mul,
    "scale": _bwd_scale,
    "concat": _bwd_concat,
    "sum": _bwd_sum,
    "mean": _bwd_mean,
    "squared_error": _bwd_squared_error,
    "gaussian_log_density": _bwd_gaussian,
    "clip": _bwd_clip,
    "log_sigmoid": _bwd_log_sigmoid,
}


class ComputeGraph:
    """
    计算图

    节点按插入顺序保存（即拓扑序），每个节点在插入时立即求值；
    forward() 会按顺序从叶子节点重新求值，便于重新绑定参数后复算。
    一个计算图只能在单个线程中使用。
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self.output: Optional[Node] = None
        self._parameters: Dict[str, Node] = {}

    # ---------- 叶子节点 ----------

    def parameter(self, name: str, value) -> Node:
        """
        注册参数节点；同名参数只注册一次，多处使用时梯度自动累加

        Args:
            name: 参数名称
            value: 参数值

        Returns:
            Node: 参数节点
        """
        if name in self._parameters:
            return self._parameters[name]
        node = Node(len(self.nodes), "parameter", [], {}, dense(value), name=name)
        self.nodes.append(node)
        self._parameters[name] = node
        return node

    def constant(self, value) -> Node:
        """注册常量节点"""
        node = Node(len(self.nodes), "constant", [], {}, dense(value))
        self.nodes.append(node)
        return node

    def bind(self, name: str, value):
        """重新绑定参数值（形状必须一致），之后需调用 forward() 复算"""
        node = self._parameters[name]
        array = dense(value)
        if array.shape != node.value.shape:
            raise GraphStructureError(f"参数 {name} 形状应为 {node.value.shape}，得到 {array.shape}",
                                      node.id, "parameter")
        node.value = array

    @property
    def parameters(self) -> Dict[str, Node]:
        return dict(self._parameters)

    # ---------- 运算节点 ----------

    def _op(self, op: str, inputs: List[Node], **attrs) -> Node:
        node_id = len(self.nodes)
        value = _FORWARD[op]([inp.value for inp in inputs], attrs, node_id)
        node = Node(node_id, op, list(inputs), attrs, value)
        self.nodes.append(node)
        return node

    def affine(self, x: Node, w: Node, b: Optional[Node] = None) -> Node:
        return self._op("affine", [x, w] if b is None else [x, w, b])

    def tanh(self, x: Node) -> Node:
        return self._op("tanh", [x])

    def add(self, a: Node, b: Node) -> Node:
        return self._op("add", [a, b])

    def sub(self, a: Node, b: Node) -> Node:
        return self._op("sub", [a, b])

    def mul(self, a: Node, b: Node) -> Node:
        return self._op("mul", [a, b])

    def scale(self, x: Node, factor: float) -> Node:
        return self._op("scale", [x], factor=float(factor))

    def concat(self, parts: Sequence[Node]) -> Node:
        return self._op("concat", list(parts))

    def sum(self, x: Node, axis: Optional[int] = None) -> Node:
        return self._op("sum", [x], axis=axis)

    def mean(self, x: Node, axis: Optional[int] = None) -> Node:
        return self._op("mean", [x], axis=axis)

    def squared_error(self, a: Node, b: Node) -> Node:
        return self._op("squared_error", [a, b])

    def gaussian_log_density(self, x: Node, mean: Node, stddev: float,
                             axis: Optional[int] = None) -> Node:
        if not stddev > 0:
            raise DomainError(f"标准差必须为正数，得到 {stddev}")
        return self._op("gaussian_log_density", [x, mean], stddev=float(stddev), axis=axis)

    def clip(self, x: Node, low: float, high: float) -> Node:
        return self._op("clip", [x], low=float(low), high=float(high))

    def log_sigmoid(self, x: Node) -> Node:
        return self._op("log_sigmoid", [x])

    def add_all(self, parts: Sequence[Node]) -> Node:
        """按固定顺序累加多个同形状节点"""
        if not parts:
            raise ContractError("add_all 需要至少一个输入")
        total = parts[0]
        for part in parts[1:]:
            total = self.add(total, part)
        return total

    def set_output(self, node: Node) -> Node:
        self.output = node
        return node

    def forward(self, output: Optional[Node] = None) -> DenseArray:
        return forward(self, output)

    def backward(self, output: Optional[Node] = None) -> GradientMap:
        return backward(self, output)


def forward(graph: ComputeGraph, output: Optional[Node] = None) -> DenseArray:
    """
    按插入顺序重新计算所有节点，返回输出节点的值

    Args:
        graph: 计算图
        output: 输出节点，默认使用 graph.output

    Returns:
        DenseArray: 输出值
    """
    target = output if output is not None else graph.output
    if target is None:
        raise ContractError("计算图没有指定输出节点")
    for node in graph.nodes:
        if node.op in _LEAF_OPS:
            continue
        node.value = _FORWARD[node.op]([inp.value for inp in node.inputs], node.attrs, node.id)
    return target.value


def backward(graph: ComputeGraph, output: Optional[Node] = None) -> GradientMap:
    """
    反向模式求导：返回标量输出对每个参数节点的梯度

    Args:
        graph: 已完成前向计算的计算图
        output: 输出节点，默认使用 graph.output

    Returns:
        GradientMap: 参数名 -> 同形状梯度
    """
    target = output if output is not None else graph.output
    if target is None:
        raise ContractError("计算图没有指定输出节点")
    if target.value.ndim != 0:
        raise ContractError(f"反向传播要求标量输出，得到形状 {target.value.shape}")

    result: GradientMap = {name: np.zeros_like(node.value)
                           for name, node in graph.parameters.items()}
    pending: Dict[int, np.ndarray] = {target.id: np.ones_like(target.value)}

    for node in reversed(graph.nodes[:target.id + 1]):
        grad = pending.pop(node.id, None)
        if grad is None:
            continue
        if node.op == "parameter":
            result[node.name] = result[node.name] + grad
            continue
        if node.op == "constant":
            continue
        input_grads = _BACKWARD[node.op]([inp.value for inp in node.inputs], node.value, grad, node.attrs)
        for inp, input_grad in zip(node.inputs, input_grads):
            if not inp.requires_grad:
                continue
            if inp.id in pending:
                pending[inp.id] = pending[inp.id] + input_grad
            else:
                pending[inp.id] = np.array(input_grad, dtype=np.float64)
    return result


def gaussian_log_density(x, mean, stddev: float) -> float:
    """
    各向同性高斯分布的对数密度（数值版本）

    Args:
        x: 样本
        mean: 均值，与 x 同形状
        stddev: 标准差，必须为正

    Returns:
        float: log N(x | mean, stddev² I)
    """
    graph = ComputeGraph()
    node = graph.gaussian_log_density(graph.constant(x), graph.constant(mean), stddev)
    return float(node.value)
