# models/__init__.py
# 數值核心：BFP 轉換、分組、PE、平滑化、KV cache、資料流
