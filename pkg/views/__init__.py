# views/__init__.py
# 視圖層：二進位檔案格式與報表輸出
