"""THC configuration package."""

# 进程级配置
