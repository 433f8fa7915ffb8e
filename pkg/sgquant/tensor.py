"""Module providing the dense tensor type and the reverse-mode gradient tape.

Tensors are immutable numpy buffers. A :class:`Tape` is built per batch
(define-by-run): every operation whose operands live on a tape records a node
holding the input node ids and a closure over the values it saved for the
backward pass. Operations on operands that are not on any tape simply
compute, which is how inference runs.
"""

import inspect
import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent for an operation."""


class NonFiniteError(ValueError):
    """Raised when NaN or Inf values reach an operation."""


def _asFloatArray(data, dtype=None):
    if dtype is None:
        if isinstance(data, np.ndarray) and data.dtype == np.float64:
            dtype = np.float64
        else:
            dtype = np.float32
    arr = np.array(data, dtype=dtype)
    arr.setflags(write=False)
    return arr


class Tensor:
    """Dense n-dimensional array of real values with an optional gradient.

    Values default to 32-bit floats. A float64 ndarray keeps its precision,
    which the finite-difference oracle relies on.

    :param data: Nested sequence, scalar or ndarray
    :param bool requiresGrad: Whether the tape should produce a gradient for
        this tensor once it is watched
    :param dtype: Optional numpy floating dtype
    """

    def __init__(self, data, requiresGrad=False, dtype=None):
        self.data = _asFloatArray(data, dtype)
        self.requiresGrad = bool(requiresGrad)
        self.grad = None
        self.tape = None
        self.nodeId = None

    @classmethod
    def fromArray(cls, arr, requiresGrad=False):
        """Wrap a freshly computed ndarray without copying it."""
        out = cls.__new__(cls)
        arr = np.asarray(arr)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        arr.setflags(write=False)
        out.data = arr
        out.requiresGrad = bool(requiresGrad)
        out.grad = None
        out.tape = None
        out.nodeId = None
        return out

    @property
    def shape(self):
        return tuple(self.data.shape)

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return int(self.data.size)

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        """Return a writable copy of the values."""
        return np.array(self.data)

    def item(self):
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requiresGrad={self.requiresGrad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Node:
    """One recorded operation on a tape."""

    __slots__ = ('nodeId', 'op', 'inputs', 'backwardFn', 'requiresGrad', 'tensor')

    def __init__(self, nodeId, op, inputs, backwardFn, requiresGrad, tensor):
        self.nodeId = nodeId
        self.op = op
        self.inputs = inputs
        self.backwardFn = backwardFn
        self.requiresGrad = requiresGrad
        self.tensor = tensor

    def __repr__(self):
        return f"Node({self.nodeId}, {self.op}, inputs={self.inputs})"


class Tape:
    """Ordered record of operations, replayed in reverse by :meth:`backward`.

    Nodes are appended as operations execute, so they are topologically
    ordered. A tape belongs to one thread.
    """

    def __init__(self):
        self.nodes = []
        self.gradients = {}

    def __len__(self):
        return len(self.nodes)

    def _append(self, tensor, op, inputs, backwardFn):
        node = Node(len(self.nodes), op, inputs, backwardFn, tensor.requiresGrad, tensor)
        self.nodes.append(node)
        tensor.tape = self
        tensor.nodeId = node.nodeId
        return tensor

    def watch(self, tensor, requiresGrad=None, name='leaf'):
        """Place a tensor on this tape as a leaf node.

        :param tensor: Tensor (or array-like) to record
        :param bool requiresGrad: Override the tensor's own flag
        :param str name: Label stored as the node's op

        :return: New tensor sharing the (read-only) values, bound to this tape
        :rtype: Tensor
        """
        if not isinstance(tensor, Tensor):
            tensor = Tensor(tensor)
        checkFinite(name, tensor)
        flag = tensor.requiresGrad if requiresGrad is None else requiresGrad
        out = Tensor.fromArray(tensor.data, requiresGrad=flag)
        return self._append(out, name, [], None)

    def record(self, op, inputs, data, backwardFn):
        """Record the result of ``op`` on ``inputs`` and return it as a tensor.

        ``backwardFn`` maps the upstream gradient to a list of input gradients
        aligned with ``inputs`` (``None`` for inputs without a gradient).
        """
        ids = [t.nodeId if t.tape is self else None for t in inputs]
        requiresGrad = any(
            i is not None and self.nodes[i].requiresGrad for i in ids
        )
        out = Tensor.fromArray(data, requiresGrad=requiresGrad)
        return self._append(out, op, ids, backwardFn if requiresGrad else None)

    def evaluate(self, graph, inputs):
        """Evaluate ``graph`` on named inputs, recording every op on this tape.

        :param callable graph: Function taking the inputs as keyword arguments
            and returning a Tensor or a dict of named Tensors
        :param dict inputs: Mapping name -> Tensor

        :return: Mapping name -> output Tensor
        :rtype: dict

        :Example:
        >>> tape = Tape()
        >>> tape.evaluate(lambda x: x + x, {'x': Tensor([1, 2])})['output'].data
        array([2., 4.], dtype=float32)
        """
        try:
            inspect.signature(graph).bind(**inputs)
        except TypeError as e:
            raise ValueError(f"graph inputs not bound: {e}") from None
        watched = {name: self.watch(value, name=name) for name, value in inputs.items()}
        outputs = graph(**watched)
        if isinstance(outputs, Tensor):
            outputs = {'output': outputs}
        return dict(outputs)

    def backward(self, loss):
        """Propagate d(loss)/d(node) to every node that requires a gradient.

        Gradients are also stored on each recorded tensor's ``grad``
        attribute. Calling backward again on the same tape (for another loss)
        recomputes from scratch.

        :param Tensor loss: Scalar tensor recorded on this tape

        :return: Mapping node id -> gradient Tensor
        :rtype: dict
        """
        if loss.tape is not self or loss.nodeId is None:
            raise RuntimeError("backward called before forward: loss is not recorded on this tape")
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

        for node in self.nodes:
            node.tensor.grad = None
        grads = {loss.nodeId: np.ones(loss.shape, dtype=loss.dtype)}
        for node in reversed(self.nodes[:loss.nodeId + 1]):
            upstream = grads.get(node.nodeId)
            if upstream is None or node.backwardFn is None:
                continue
            inputGrads = node.backwardFn(upstream)
            for inputId, g in zip(node.inputs, inputGrads):
                if inputId is None or g is None or not self.nodes[inputId].requiresGrad:
                    continue
                target = self.nodes[inputId].tensor
                if g.shape != target.shape:
                    raise ShapeError(
                        f"{node.op} backward produced shape {g.shape} for input of shape {target.shape}"
                    )
                if inputId in grads:
                    grads[inputId] = grads[inputId] + g
                else:
                    grads[inputId] = g

        self.gradients = {}
        for nodeId, g in grads.items():
            node = self.nodes[nodeId]
            if not node.requiresGrad:
                continue
            gradTensor = Tensor.fromArray(np.asarray(g, dtype=node.tensor.dtype))
            node.tensor.grad = gradTensor
            self.gradients[nodeId] = gradTensor
        return self.gradients


def checkFinite(op, *tensors):
    for t in tensors:
        if not np.isfinite(t.data).all():
            raise NonFiniteError(f"{op}: non-finite values in input of shape {t.shape}")


def _tapeOf(op, tensors):
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is not None and t.tape is not tape:
            raise ValueError(f"{op}: operands are recorded on different tapes")
        tape = t.tape
    return tape


def result(op, inputs, data, backwardFn):
    """Return ``data`` as a tensor, recording it when any input is on a tape."""
    tape = _tapeOf(op, inputs)
    if tape is None:
        return Tensor.fromArray(data)
    return tape.record(op, inputs, data, backwardFn)


def asTensor(value, like=None):
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcastShape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b):
    a, b = asTensor(a, b if isinstance(b, Tensor) else None), asTensor(b, a)
    checkFinite('add', a, b)
    _broadcastShape('add', a, b)

    def backward(g):
        return [unbroadcast(g, a.shape), unbroadcast(g, b.shape)]

    return result('add', [a, b], a.data + b.data, backward)


def sub(a, b):
    a, b = asTensor(a, b if isinstance(b, Tensor) else None), asTensor(b, a)
    checkFinite('sub', a, b)
    _broadcastShape('sub', a, b)

    def backward(g):
        return [unbroadcast(g, a.shape), unbroadcast(-g, b.shape)]

    return result('sub', [a, b], a.data - b.data, backward)


def mul(a, b):
    """Elementwise product with broadcasting."""
    a, b = asTensor(a, b if isinstance(b, Tensor) else None), asTensor(b, a)
    checkFinite('mul', a, b)
    _broadcastShape('mul', a, b)
    aData, bData = a.data, b.data

    def backward(g):
        return [unbroadcast(g * bData, a.shape), unbroadcast(g * aData, b.shape)]

    return result('mul', [a, b], aData * bData, backward)


def scale(a, c):
    """Multiply by a python scalar constant."""
    checkFinite('scale', a)
    c = a.dtype.type(c)

    def backward(g):
        return [g * c]

    return result('scale', [a], a.data * c, backward)


def matmul(a, b):
    """Matrix product of a 2-D tensor with a 1-D or 2-D tensor."""
    checkFinite('matmul', a, b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    aData, bData = a.data, b.data

    def backward(g):
        if bData.ndim == 1:
            return [np.outer(g, bData), aData.T @ g]
        return [g @ bData.T, aData.T @ g]

    return result('matmul', [a, b], aData @ bData, backward)


def reshape(a, shape):
    checkFinite('reshape', a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    inShape = a.shape

    def backward(g):
        return [g.reshape(inShape)]

    return result('reshape', [a], out, backward)


def reduceSum(a):
    """Sum of all elements, as a scalar tensor."""
    checkFinite('sum', a)
    inShape, dtype = a.shape, a.dtype

    def backward(g):
        return [np.full(inShape, g, dtype=dtype)]

    return result('sum', [a], np.asarray(a.data.sum(), dtype=dtype), backward)


def reduceMean(a):
    checkFinite('mean', a)
    inShape, dtype, n = a.shape, a.dtype, max(a.size, 1)

    def backward(g):
        return [np.full(inShape, g / n, dtype=dtype)]

    return result('mean', [a], np.asarray(a.data.mean(), dtype=dtype), backward)


def _scalarValue(out):
    if isinstance(out, Tensor):
        if out.size != 1:
            raise ShapeError(f"finite difference needs a scalar function, got shape {out.shape}")
        return out.item()
    out = np.asarray(out, dtype=np.float64)
    if out.size != 1:
        raise ShapeError(f"finite difference needs a scalar function, got shape {out.shape}")
    return float(out.reshape(-1)[0])


def finiteDifferenceGradient(f, x, h=1e-3):
    """Central-difference gradient estimate of a scalar function.

    Evaluated in double precision: ``x`` is promoted to float64 and every
    perturbed point is passed to ``f`` as a float64 Tensor.

    :param callable f: Function Tensor -> scalar Tensor (or float)
    :param Tensor x: Point of evaluation
    :param float h: Step size, > 0

    :return: (f(x + h e_i) - f(x - h e_i)) / 2h for every element i
    :rtype: Tensor
    """
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    point = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    flat = point.reshape(-1)
    grad = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fPlus = _scalarValue(f(Tensor(point, dtype=np.float64)))
        flat[i] = orig - h
        fMinus = _scalarValue(f(Tensor(point, dtype=np.float64)))
        flat[i] = orig
        grad[i] = (fPlus - fMinus) / (2 * h)
    return Tensor(grad.reshape(point.shape), dtype=np.float64)
