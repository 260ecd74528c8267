"""
THC 异常定义
所有领域错误都继承自 ThcError，CLI 根据类型映射退出码
"""


class ThcError(Exception):
    """THC 错误基类"""
    pass


class ConfigError(ThcError):
    """配置错误（聚类规模、划分比例、生成参数等）"""
    pass


class ParseError(ConfigError):
    """文件解析错误，消息中包含文件和行号"""

    def __init__(self, message: str, path=None, line=None):
        self.path = str(path) if path is not None else None
        self.line = line
        location = ''
        if self.path is not None:
            location = f"{self.path}:{line}: " if line is not None else f"{self.path}: "
        super().__init__(f"{location}{message}")


class DimensionError(ThcError):
    """张量形状不匹配"""
    pass


class NumericDomainError(ThcError):
    """数值错误：非有限值、对非正数取对数、除以零"""
    pass


class NonFiniteLossError(NumericDomainError):
    """训练损失出现非有限值"""

    def __init__(self, batch_index: int, component: str, value: float):
        self.batch_index = batch_index
        self.component = component
        self.value = value
        super().__init__(f"第 {batch_index} 个批次的损失分量 {component} 非有限: {value}")


class ContractError(ThcError):
    """调用前置条件不满足"""
    pass


class MetricError(ContractError):
    """评估指标无定义（例如 AUROC 只有单一类别）"""
    pass
