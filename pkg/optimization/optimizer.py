"""
Adam 优化器（可选解耦权重衰减）
"""
import logging
from typing import Dict, Tuple

import numpy as np

from thc_core.exceptions import ConfigError, ContractError

logger = logging.getLogger(__name__)


class Adam:
    """按参数名维护一阶、二阶矩；step 返回新的参数数组，不修改输入"""

    def __init__(self, lr: float = 1e-4, betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        if lr < 0 or eps <= 0 or weight_decay < 0:
            raise ConfigError(f"优化器参数无效: lr={lr}, eps={eps}, weight_decay={weight_decay}")
        if not all(0 <= b < 1 for b in betas):
            raise ConfigError(f"动量系数必须在 [0, 1): {betas}")
        self.lr = float(lr)
        self.beta1, self.beta2 = (float(b) for b in betas)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.steps = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        if set(params) != set(grads):
            raise ContractError(f"参数与梯度的名称不一致: {sorted(set(params) ^ set(grads))}")
        self.steps += 1
        correction1 = 1.0 - self.beta1 ** self.steps
        correction2 = 1.0 - self.beta2 ** self.steps
        updated = {}
        for name in sorted(params):
            p = np.asarray(params[name], dtype=np.float64)
            g = np.asarray(grads[name], dtype=np.float64)
            if g.shape != p.shape:
                raise ContractError(f"参数 {name} 的梯度形状 {g.shape} 与参数 {p.shape} 不一致")
            m = self.beta1 * self.m.get(name, np.zeros_like(p)) + (1.0 - self.beta1) * g
            v = self.beta2 * self.v.get(name, np.zeros_like(p)) + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            update = (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p
            updated[name] = p - self.lr * update
        return updated

    def state_dict(self) -> Dict:
        return {
            'steps': self.steps,
            'm': {k: v.copy() for k, v in self.m.items()},
            'v': {k: v.copy() for k, v in self.v.items()},
        }

    def load_state_dict(self, state: Dict) -> None:
        self.steps = int(state['steps'])
        self.m = {k: np.array(v, dtype=np.float64) for k, v in state['m'].items()}
        self.v = {k: np.array(v, dtype=np.float64) for k, v in state['v'].items()}
