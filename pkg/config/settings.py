import os
from pathlib import Path
from dotenv import load_dotenv

# 加载.env文件
load_dotenv()

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# 日志级别
LOG_LEVEL = os.getenv('THC_LOG_LEVEL', 'INFO').upper()

# 并行评估与数据生成的工作线程数
WORKER_COUNT = max(1, int(os.getenv('THC_WORKERS', default='1')))

# 默认输出目录
OUTPUT_DIR = os.getenv('THC_OUTPUT_DIR', default=os.path.join(BASE_DIR, 'runs'))

# 检查点文件名
CHECKPOINT_NAME = os.getenv('THC_CHECKPOINT_NAME', default='checkpoint.json')

# 训练指标与运行清单文件名
METRICS_NAME = 'metrics.csv'
RUN_MANIFEST_NAME = 'run_manifest.json'
