# controllers/__init__.py
# 控制器層：模擬流程與檔案 / EMA / 儲存量指令
