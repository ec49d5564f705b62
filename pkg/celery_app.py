from safe_explore.tasks.replications import celery_app

if __name__ == '__main__':
    celery_app.start()
